#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scorecraft::autodiff::{Graph, NodeId};
use scorecraft::losses::{self, SensitivityTiers};
use scorecraft::{MonotoneMlp, Tensor};

/// `KL(q || p)` for two Gaussians by composite Simpson integration over
/// `mu1 +- 14 sigma1`.
pub fn kl_gaussian_numeric(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    let log_pdf = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let n = 40_000;
    let (lo, hi) = (mu1 - 14.0 * s1, mu1 + 14.0 * s1);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let lq = log_pdf(x, mu1, s1);
        lq.exp() * (lq - log_pdf(x, mu2, s2))
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + h * i as f64);
    }
    acc * h / 3.0
}

/// Which loss a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Bound,
    SquaredBound,
    Mode,
    Sensitivity,
    KlGaussian,
    KlExponential,
    Total,
}

pub const ALL_LOSSES: [LossKind; 7] = [
    LossKind::Bound,
    LossKind::SquaredBound,
    LossKind::Mode,
    LossKind::Sensitivity,
    LossKind::KlGaussian,
    LossKind::KlExponential,
    LossKind::Total,
];

/// Builds the chosen loss for `model` on `x`, returning the loss node and the
/// parameter nodes.
pub fn build_loss(g: &mut Graph, model: &MonotoneMlp, x: &Tensor, kind: LossKind) -> (NodeId, [NodeId; 6]) {
    let built = model.build(g, x, true).unwrap();
    let s = built.scores();
    let tiers = SensitivityTiers::new(vec![vec![3], vec![1, 2]], 4).unwrap();
    let loss = match kind {
        // bounds placed inside the score range so both hinges are active
        LossKind::Bound => losses::bound_loss(g, s, 0.3, 0.6, false).unwrap(),
        LossKind::SquaredBound => losses::bound_loss(g, s, 0.3, 0.6, true).unwrap(),
        LossKind::Mode => losses::mode_loss(g, s, 0.45).unwrap(),
        LossKind::Sensitivity => {
            let grads = built.input_gradients(g).unwrap();
            losses::sensitivity_loss(g, grads, &tiers).unwrap()
        }
        LossKind::KlGaussian => {
            let q = losses::batch_moments(g, s).unwrap();
            losses::kl_gaussian(g, q, 1.0, 0.5).unwrap()
        }
        LossKind::KlExponential => {
            let q = losses::batch_moments(g, s).unwrap();
            losses::kl_exponential(g, q, 2.0).unwrap()
        }
        LossKind::Total => {
            let grads = built.input_gradients(g).unwrap();
            let q = losses::batch_moments(g, s).unwrap();
            let parts = losses::LossComponents {
                bound: Some(losses::bound_loss(g, s, 0.3, 0.6, false).unwrap()),
                sensitivity: Some(losses::sensitivity_loss(g, grads, &tiers).unwrap()),
                distribution: Some(losses::kl_gaussian(g, q, 1.0, 0.5).unwrap()),
                mode: Some(losses::mode_loss(g, s, 0.45).unwrap()),
            };
            let w = losses::LossWeights {
                alpha: 10.0,
                beta: 0.1,
                gamma: 1.0,
                delta: 0.5,
            };
            losses::total_loss(g, &parts, &w).unwrap()
        }
    };
    (loss, built.parameters())
}

pub fn loss_value(model: &MonotoneMlp, x: &Tensor, kind: LossKind) -> f64 {
    let mut g = Graph::new();
    let (l, _) = build_loss(&mut g, model, x, kind);
    g.value(l).item()
}

/// A 4-feature model of width 8 with every parameter (biases included) drawn
/// at random.
pub fn random_model(seed: u64, monotone: bool) -> MonotoneMlp {
    let mut m = MonotoneMlp::init(4, [8, 8], monotone, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (k, p) in m.parameters_mut().into_iter().enumerate() {
        if k % 2 == 1 {
            for v in p.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

pub fn random_inputs(seed: u64, rows: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(rows, 4, (0..rows * 4).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Largest relative error between backward gradients and central finite
/// differences over every parameter entry.
pub fn max_parameter_grad_error(model: &MonotoneMlp, x: &Tensor, kind: LossKind, h: f64) -> f64 {
    let mut g = Graph::new();
    let (l, params) = build_loss(&mut g, model, x, kind);
    g.backward(l).unwrap();
    let analytic: Vec<Tensor> = params.iter().map(|&p| g.grad(p)).collect();
    let mut worst = 0.0f64;
    for k in 0..6 {
        for i in 0..analytic[k].len() {
            let mut up = model.clone();
            up.parameters_mut()[k].data_mut()[i] += h;
            let mut down = model.clone();
            down.parameters_mut()[k].data_mut()[i] -= h;
            let fd = (loss_value(&up, x, kind) - loss_value(&down, x, kind)) / (2.0 * h);
            let a = analytic[k].data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
