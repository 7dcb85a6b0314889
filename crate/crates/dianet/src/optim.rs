//! SGD with momentum and weight decay.

use crate::param::Parameter;

/// Momentum-SGD state: one velocity buffer per parameter, in registration
/// order. Update rule per element:
///
/// ```text
/// v    <- momentum * v + grad + wd * param
/// param <- param - lr * v
/// ```
///
/// Gradients are zeroed after each step.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Parameter], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &[Parameter], lr: f64) {
        assert_eq!(params.len(), self.velocity.len(), "parameter set changed");
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let wd = if p.weight_decay { self.weight_decay } else { 0.0 };
            let grad = p.value.grad();
            p.value.with_data_mut(|data| {
                match grad {
                    Some(g) => {
                        for i in 0..data.len() {
                            v[i] = self.momentum * v[i] + g[i] + wd * data[i];
                            data[i] -= lr * v[i];
                        }
                    }
                    None => {
                        // No gradient reached this parameter; decay still applies.
                        for i in 0..data.len() {
                            v[i] = self.momentum * v[i] + wd * data[i];
                            data[i] -= lr * v[i];
                        }
                    }
                }
            });
            p.value.with_grad_mut(|g| *g = None);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64, wd: bool) -> Parameter {
        Parameter::new("p", Tensor::scalar(v), wd)
    }

    fn set_grad(p: &Parameter, g: f64) {
        p.value.with_grad_mut(|gr| *gr = Some(vec![g]));
    }

    #[test]
    fn plain_step_descends_by_lr_times_grad() {
        let p = scalar_param(1.0, false);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.0, 0.0);
        set_grad(&p, 0.25);
        opt.step(std::slice::from_ref(&p), 0.1);
        assert!((p.value.item() - (1.0 - 0.1 * 0.25)).abs() < 1e-15);
        assert!(p.value.grad().is_none(), "grad must be cleared");
    }

    #[test]
    fn momentum_recurrence_matches_hand_calculation() {
        // Constant gradient g: v1 = g, v2 = 0.9 g + g = 1.9 g.
        let g = 0.5;
        let lr = 0.01;
        let p = scalar_param(2.0, false);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.9, 0.0);

        set_grad(&p, g);
        opt.step(std::slice::from_ref(&p), lr);
        let after1 = p.value.item();
        assert!((after1 - (2.0 - lr * g)).abs() < 1e-15);

        set_grad(&p, g);
        opt.step(std::slice::from_ref(&p), lr);
        let second_update = after1 - p.value.item();
        assert!((second_update - lr * 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_alone_shrinks_geometrically() {
        let p = scalar_param(1.0, true);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.0, 0.01);
        set_grad(&p, 0.0);
        opt.step(std::slice::from_ref(&p), 0.1);
        assert!((p.value.item() - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        set_grad(&p, 0.0);
        opt.step(std::slice::from_ref(&p), 0.1);
        assert!((p.value.item() - (1.0 - 0.1 * 0.01_f64).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn decay_ineligible_parameter_is_untouched_by_wd() {
        let p = scalar_param(1.0, false);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.0, 0.5);
        set_grad(&p, 0.0);
        opt.step(std::slice::from_ref(&p), 0.1);
        assert_eq!(p.value.item(), 1.0);
    }
}
