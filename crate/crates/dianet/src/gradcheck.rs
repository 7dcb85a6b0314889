//! Central finite-difference verification of reverse-mode gradients.
//!
//! Every check rebuilds its graph from the current probe values, compares
//! the analytic gradient of a scalar loss against (f(x+h) - f(x-h)) / 2h at
//! every probe element, and reports the worst relative error with a unit
//! floor: |a - n| / max(1, |a|, |n|). Probe values stay clear of ReLU kinks
//! so the difference quotient is valid.

use std::cell::RefCell;

use crate::attention::{DiaLstmParams, DiaState, OutputActivation, StandardLstmParams};
use crate::backbone::{
    AttentionKind, BlockKind, FExt, Network, NetworkConfig, StageSpec,
};
use crate::ops::{self, RunningStats};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOL_OPS: f64 = 1e-6;
pub const TOL_NETWORK: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Compares analytic gradients of `build()`'s scalar output with central
/// differences over every element of every probe. `fault` is added to one
/// analytic gradient entry to exercise failure detection (0.0 disables).
pub fn finite_diff_check(probes: &[Tensor], build: &dyn Fn() -> Tensor, fault: f64) -> (f64, usize) {
    for p in probes {
        p.zero_grad();
    }
    let loss = build();
    loss.backward().expect("gradcheck loss must be scalar");
    let mut analytic: Vec<Vec<f64>> = probes
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in probes {
        p.zero_grad();
    }
    if fault != 0.0 {
        if let Some(first) = analytic.first_mut().and_then(|g| g.first_mut()) {
            *first += fault;
        }
    }

    let mut worst = 0.0f64;
    let mut elements = 0usize;
    for (p, grads) in probes.iter().zip(&analytic) {
        for i in 0..p.numel() {
            p.nudge(i, FD_STEP);
            let up = build().item();
            p.nudge(i, -2.0 * FD_STEP);
            let down = build().item();
            p.nudge(i, FD_STEP);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[i], numeric));
            elements += 1;
        }
    }
    (worst, elements)
}

fn probe(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut data = vec![0.0; shape.iter().product()];
    rng.fill_uniform(&mut data, lo, hi);
    Tensor::from_vec(data, shape).requires_grad()
}

/// Uniform magnitudes in [0.2, 1.5] with random sign: keeps ReLU arguments
/// away from zero.
fn probe_off_kink(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut data = vec![0.0; shape.iter().product()];
    for v in data.iter_mut() {
        let mag = rng.uniform(0.2, 1.5);
        *v = if rng.coin() { mag } else { -mag };
    }
    Tensor::from_vec(data, shape).requires_grad()
}

fn coeffs(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    rng.fill_uniform(&mut w, -1.0, 1.0);
    w
}

fn result(name: &str, (err, elements): (f64, usize), tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_err: err,
        elements,
        tolerance,
    }
}

/// Per-op finite-difference suite.
pub fn suite_ops(seed: u64, fault: f64) -> Vec<CheckResult> {
    let mut rng = Rng::new(seed).derive("gradcheck-ops");
    let mut out = Vec::new();

    {
        let x = probe(&mut rng, &[2, 3, 5, 5], -2.0, 2.0);
        let k = probe(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let w = coeffs(&mut rng, 2 * 4 * 5 * 5);
        let check = finite_diff_check(
            &[x.clone(), k.clone()],
            &move || ops::weighted_sum(&ops::conv2d(&x, &k, 1, 1).unwrap(), &w),
            fault,
        );
        out.push(result("conv2d", check, TOL_OPS));
    }
    {
        let x = probe(&mut rng, &[3, 4], -2.0, 2.0);
        let wt = probe(&mut rng, &[5, 4], -1.0, 1.0);
        let b = probe(&mut rng, &[5], -1.0, 1.0);
        let w = coeffs(&mut rng, 15);
        let check = finite_diff_check(
            &[x.clone(), wt.clone(), b.clone()],
            &move || ops::weighted_sum(&ops::linear(&x, &wt, Some(&b)).unwrap(), &w),
            fault,
        );
        out.push(result("linear", check, TOL_OPS));
    }
    {
        let x = probe(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let w = coeffs(&mut rng, 6);
        let check = finite_diff_check(
            &[x.clone()],
            &move || ops::weighted_sum(&ops::global_average_pool(&x).unwrap(), &w),
            fault,
        );
        out.push(result("global_average_pool", check, TOL_OPS));
    }
    {
        let f = probe(&mut rng, &[2, 3, 3, 3], -2.0, 2.0);
        let s = probe(&mut rng, &[2, 3], -2.0, 2.0);
        let w = coeffs(&mut rng, 2 * 3 * 9);
        let check = finite_diff_check(
            &[f.clone(), s.clone()],
            &move || ops::weighted_sum(&ops::channelwise_mul(&f, &s).unwrap(), &w),
            fault,
        );
        out.push(result("channelwise_mul", check, TOL_OPS));
    }
    {
        let x = probe(&mut rng, &[2, 7], -2.0, 2.0);
        let w = coeffs(&mut rng, 14);
        let xs = x.clone();
        let ws = w.clone();
        out.push(result(
            "sigmoid",
            finite_diff_check(&[x.clone()], &move || ops::weighted_sum(&ops::sigmoid(&xs), &ws), fault),
            TOL_OPS,
        ));
        let x2 = probe(&mut rng, &[2, 7], -2.0, 2.0);
        let x2c = x2.clone();
        let w2 = coeffs(&mut rng, 14);
        out.push(result(
            "tanh",
            finite_diff_check(&[x2.clone()], &move || ops::weighted_sum(&ops::tanh(&x2c), &w2), fault),
            TOL_OPS,
        ));
        let x3 = probe_off_kink(&mut rng, &[2, 7]);
        let x3c = x3.clone();
        let w3 = coeffs(&mut rng, 14);
        out.push(result(
            "relu",
            finite_diff_check(&[x3.clone()], &move || ops::weighted_sum(&ops::relu(&x3c), &w3), fault),
            TOL_OPS,
        ));
    }
    {
        let a = probe(&mut rng, &[3, 4], -2.0, 2.0);
        let b = probe(&mut rng, &[3, 4], -2.0, 2.0);
        let w = coeffs(&mut rng, 12);
        let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
        out.push(result(
            "add",
            finite_diff_check(
                &[a.clone(), b.clone()],
                &move || ops::weighted_sum(&ops::add(&ac, &bc), &wc),
                fault,
            ),
            TOL_OPS,
        ));
        let c = probe(&mut rng, &[3, 4], -2.0, 2.0);
        let d = probe(&mut rng, &[3, 4], -2.0, 2.0);
        let w2 = coeffs(&mut rng, 12);
        let (cc, dc) = (c.clone(), d.clone());
        out.push(result(
            "mul",
            finite_diff_check(
                &[c.clone(), d.clone()],
                &move || ops::weighted_sum(&ops::mul(&cc, &dc), &w2),
                fault,
            ),
            TOL_OPS,
        ));
    }
    {
        let x = probe(&mut rng, &[4, 3, 3, 3], -2.0, 2.0);
        let gamma = probe(&mut rng, &[3], 0.5, 1.5);
        let beta = probe(&mut rng, &[3], -0.5, 0.5);
        let w = coeffs(&mut rng, 4 * 3 * 9);
        let stats = RefCell::new(RunningStats::new(3));
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        let check = finite_diff_check(
            &[x.clone(), gamma.clone(), beta.clone()],
            &move || {
                let mut s = stats.borrow_mut();
                ops::weighted_sum(
                    &ops::batch_norm(&xc, &gc, &bc, &mut s, true, 1e-5, 0.1).unwrap(),
                    &w,
                )
            },
            fault,
        );
        out.push(result("batch_norm(train)", check, TOL_OPS));

        let x2 = probe(&mut rng, &[2, 3, 3, 3], -2.0, 2.0);
        let g2 = probe(&mut rng, &[3], 0.5, 1.5);
        let b2 = probe(&mut rng, &[3], -0.5, 0.5);
        let w2 = coeffs(&mut rng, 2 * 3 * 9);
        let mut inference_stats = RunningStats::new(3);
        for c in 0..3 {
            inference_stats.mean[c] = rng.uniform(-0.5, 0.5);
            inference_stats.var[c] = rng.uniform(0.5, 2.0);
        }
        let stats2 = RefCell::new(inference_stats);
        let (x2c, g2c, b2c) = (x2.clone(), g2.clone(), b2.clone());
        let check = finite_diff_check(
            &[x2.clone(), g2.clone(), b2.clone()],
            &move || {
                let mut s = stats2.borrow_mut();
                ops::weighted_sum(
                    &ops::batch_norm(&x2c, &g2c, &b2c, &mut s, false, 1e-5, 0.1).unwrap(),
                    &w2,
                )
            },
            fault,
        );
        out.push(result("batch_norm(eval)", check, TOL_OPS));
    }
    {
        let logits = probe(&mut rng, &[4, 6], -2.0, 2.0);
        let labels = vec![0usize, 3, 5, 2];
        let lc = logits.clone();
        let check = finite_diff_check(
            &[logits.clone()],
            &move || ops::softmax_cross_entropy(&lc, &labels).unwrap(),
            fault,
        );
        out.push(result("softmax_cross_entropy", check, TOL_OPS));
    }
    {
        // Composite: conv -> batch norm -> relu.
        let x = probe(&mut rng, &[2, 2, 5, 5], -2.0, 2.0);
        let k = probe(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let gamma = probe(&mut rng, &[3], 0.5, 1.5);
        let beta = probe(&mut rng, &[3], 0.3, 0.8);
        let w = coeffs(&mut rng, 2 * 3 * 25);
        let stats = RefCell::new(RunningStats::new(3));
        let (xc, kc, gc, bc) = (x.clone(), k.clone(), gamma.clone(), beta.clone());
        let check = finite_diff_check(
            &[x.clone(), k.clone(), gamma.clone(), beta.clone()],
            &move || {
                let mut s = stats.borrow_mut();
                let conv = ops::conv2d(&xc, &kc, 1, 1).unwrap();
                let bn = ops::batch_norm(&conv, &gc, &bc, &mut s, true, 1e-5, 0.1).unwrap();
                ops::weighted_sum(&ops::relu(&bn), &w)
            },
            fault,
        );
        out.push(result("conv-bn-relu", check, TOL_OPS));
    }
    out
}

/// DIA-LSTM cell suite: single step, 5-step unroll, standard-cell step.
/// Gradients are taken with respect to all cell parameters and the inputs
/// (y, h, c).
pub fn suite_cell(seed: u64, fault: f64) -> Vec<CheckResult> {
    let mut rng = Rng::new(seed).derive("gradcheck-cell");
    let (n, r, b) = (6usize, 2usize, 2usize);
    let mut out = Vec::new();

    {
        let cell = DiaLstmParams::new("gc", &Rng::new(seed ^ 1), n, r, OutputActivation::Sigmoid).unwrap();
        let y = probe(&mut rng, &[b, n], -1.5, 1.5);
        let h0 = probe(&mut rng, &[b, n], 0.05, 0.9);
        let c0 = probe(&mut rng, &[b, n], -1.0, 1.0);
        let w = coeffs(&mut rng, b * n);
        let mut probes: Vec<Tensor> = cell.params().iter().map(|p| p.value.clone()).collect();
        probes.extend([y.clone(), h0.clone(), c0.clone()]);
        let check = finite_diff_check(
            &probes,
            &move || {
                let state = DiaState { h: h0.clone(), c: c0.clone(), t: 0 };
                let (h, c) = cell.step(&y, &state).unwrap();
                ops::add(
                    &ops::weighted_sum(&h, &w),
                    &ops::weighted_sum(&c, &w),
                )
            },
            fault,
        );
        out.push(result("dia_lstm_step", check, TOL_OPS));
    }
    {
        // Backprop through time: 5 chained steps on shared parameters.
        let cell = DiaLstmParams::new("gcu", &Rng::new(seed ^ 2), n, r, OutputActivation::Sigmoid).unwrap();
        let inputs: Vec<Tensor> = (0..5).map(|_| probe(&mut rng, &[b, n], -1.5, 1.5)).collect();
        let w = coeffs(&mut rng, b * n);
        let mut probes: Vec<Tensor> = cell.params().iter().map(|p| p.value.clone()).collect();
        probes.extend(inputs.iter().cloned());
        let check = finite_diff_check(
            &probes,
            &move || {
                let mut state = DiaState::zeros(b, n);
                for y in &inputs {
                    let (h, c) = cell.step(y, &state).unwrap();
                    state = DiaState { h, c, t: state.t + 1 };
                }
                ops::weighted_sum(&state.h, &w)
            },
            fault,
        );
        out.push(result("dia_lstm_unroll5", check, TOL_OPS));
    }
    {
        let cell = StandardLstmParams::new("gs", &Rng::new(seed ^ 3), n).unwrap();
        let y = probe(&mut rng, &[b, n], -1.5, 1.5);
        let h0 = probe(&mut rng, &[b, n], -0.9, 0.9);
        let c0 = probe(&mut rng, &[b, n], -1.0, 1.0);
        let w = coeffs(&mut rng, b * n);
        let mut probes: Vec<Tensor> = cell.params().iter().map(|p| p.value.clone()).collect();
        probes.extend([y.clone(), h0.clone(), c0.clone()]);
        let check = finite_diff_check(
            &probes,
            &move || {
                let state = DiaState { h: h0.clone(), c: c0.clone(), t: 0 };
                let (h, _) = cell.step(&y, &state).unwrap();
                ops::weighted_sum(&h, &w)
            },
            fault,
        );
        out.push(result("standard_lstm_step", check, TOL_OPS));
    }
    out
}

fn tiny_network_config(attention: AttentionKind) -> NetworkConfig {
    NetworkConfig {
        stages: vec![
            StageSpec { channels: 4, blocks: 1, stride: 1 },
            StageSpec { channels: 8, blocks: 1, stride: 2 },
        ],
        block_kind: BlockKind::Basic,
        attention,
        reduction_ratio: 2,
        cells_per_unit: 1,
        output_activation: OutputActivation::Sigmoid,
        f_ext: FExt::Gap,
        use_batch_norm: true,
        skip_removal_fraction: 0.0,
        dia_enabled_stages: vec![0, 1],
        classes: 2,
        force_attention_ones: false,
    }
}

/// One full residual block with a DIA unit, checked with respect to every
/// parameter and the block input.
pub fn suite_block(seed: u64, fault: f64) -> Vec<CheckResult> {
    let mut rng = Rng::new(seed).derive("gradcheck-block");
    let cfg = tiny_network_config(AttentionKind::DiaLstm);
    let net = Network::new(&cfg, seed ^ 0xb10c).unwrap();
    let x = probe(&mut rng, &[2, 4, 6, 6], -1.0, 1.0);
    let w = coeffs(&mut rng, 2 * 4 * 36);

    let mut probes: Vec<Tensor> = net.parameters().iter().map(|p| p.value.clone()).collect();
    // Keep only stage-0 parameters plus input; the rest never enter this graph.
    probes.retain(|t| {
        net.parameters()
            .iter()
            .any(|p| p.value.id() == t.id() && p.id.starts_with("stage0."))
    });
    probes.push(x.clone());

    let check = finite_diff_check(
        &probes,
        &move || {
            let stage = &net.stages[0];
            let (out, _) = stage.forward(&x, true, false, false).unwrap();
            ops::weighted_sum(&out, &w)
        },
        fault,
    );
    vec![result("residual_block(dia)", check, TOL_OPS)]
}

/// A tiny two-stage network end to end, at the looser network tolerance.
pub fn suite_network(seed: u64, fault: f64) -> Vec<CheckResult> {
    let mut rng = Rng::new(seed).derive("gradcheck-net");
    let cfg = tiny_network_config(AttentionKind::DiaLstm);
    let net = Network::new(&cfg, seed ^ 0xffee).unwrap();
    let mut images = vec![0.0; 2 * 3 * 8 * 8];
    rng.fill_normal(&mut images, 0.0, 1.0);
    let images = Tensor::from_vec(images, &[2, 3, 8, 8]);
    let labels = vec![0usize, 1];

    let probes: Vec<Tensor> = net.parameters().iter().map(|p| p.value.clone()).collect();
    let check = finite_diff_check(
        &probes,
        &move || {
            let out = net.forward(&images, true, false).unwrap();
            ops::softmax_cross_entropy(&out.logits, &labels).unwrap()
        },
        fault,
    );
    vec![result("network(dia)", check, TOL_NETWORK)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_suite_passes() {
        for r in suite_ops(11, 0.0) {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn cell_suite_passes() {
        for r in suite_cell(12, 0.0) {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn block_suite_passes() {
        for r in suite_block(13, 0.0) {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn network_suite_passes() {
        for r in suite_network(14, 0.0) {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let results = suite_ops(11, 0.05);
        assert!(results.iter().any(|r| !r.passed()));
    }

    #[test]
    fn tanh_gradient_matches_central_differences() {
        let mut rng = Rng::new(4);
        let x = probe(&mut rng, &[5], -2.0, 2.0);
        let w = coeffs(&mut rng, 5);
        let xc = x.clone();
        let (err, n) = finite_diff_check(
            &[x.clone()],
            &move || ops::weighted_sum(&ops::tanh(&xc), &w),
            0.0,
        );
        assert_eq!(n, 5);
        assert!(err < 1e-6, "err {err}");
    }
}
