//! Trainable parameters and their initializers.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// A named trainable leaf tensor. The gradient accumulator lives on the
/// tensor itself; the optimizer reads and zeroes it.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub id: String,
    pub weight_decay: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor, weight_decay: bool) -> Self {
        Parameter {
            value: value.requires_grad(),
            id: id.into(),
            weight_decay,
        }
    }

    /// Kaiming fan-in normal init: std = sqrt(2 / fan_in). Used for convs.
    pub fn kaiming_conv(id: &str, rng: &Rng, shape: &[usize]) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let mut data = vec![0.0; shape.iter().product()];
        rng.derive(id).fill_normal(&mut data, 0.0, std);
        Parameter::new(id, Tensor::from_vec(data, shape), true)
    }

    /// Uniform +-1/sqrt(fan_in) init for linear / gate weights `[out, in]`.
    pub fn uniform_linear(id: &str, rng: &Rng, shape: &[usize]) -> Self {
        let fan_in = shape[1] as f64;
        let bound = 1.0 / fan_in.sqrt();
        let mut data = vec![0.0; shape.iter().product()];
        rng.derive(id).fill_uniform(&mut data, -bound, bound);
        Parameter::new(id, Tensor::from_vec(data, shape), true)
    }

    pub fn constant(id: &str, shape: &[usize], value: f64, weight_decay: bool) -> Self {
        Parameter::new(id, Tensor::full(shape, value), weight_decay)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_reproducible_per_id() {
        let rng = Rng::new(99);
        let a = Parameter::kaiming_conv("conv1.weight", &rng, &[4, 3, 3, 3]);
        let b = Parameter::kaiming_conv("conv1.weight", &rng, &[4, 3, 3, 3]);
        let c = Parameter::kaiming_conv("conv2.weight", &rng, &[4, 3, 3, 3]);
        assert_eq!(a.value.to_vec(), b.value.to_vec());
        assert_ne!(a.value.to_vec(), c.value.to_vec());
    }

    #[test]
    fn uniform_linear_respects_bound() {
        let rng = Rng::new(1);
        let p = Parameter::uniform_linear("fc.weight", &rng, &[8, 16]);
        let bound = 1.0 / 4.0;
        assert!(p.value.to_vec().iter().all(|v| v.abs() <= bound));
    }
}
