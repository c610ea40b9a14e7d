//! Constraint losses as differentiable graph constructions.
//!
//! Every loss is a batch mean, so loss weights do not depend on batch size.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to sensitivity denominators.
pub const SENSITIVITY_EPS: f64 = 1e-8;
/// Lower bound on the batch standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Weights of the bound, sensitivity, distribution and mode losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub delta: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::validation(
                    format!("$.weights.{name}"),
                    format!("weight must be finite and >= 0, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// Feature-index groups ordered from most to least important. Features in
/// no group form an implicit lowest tier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensitivityTiers {
    tiers: Vec<Vec<usize>>,
    n_features: usize,
}

impl SensitivityTiers {
    pub fn new(tiers: Vec<Vec<usize>>, n_features: usize) -> Result<Self> {
        let tiers: Vec<Vec<usize>> = tiers.into_iter().filter(|t| !t.is_empty()).collect();
        if tiers.is_empty() {
            return Err(Error::InvalidConfig("sensitivity tiers are all empty".into()));
        }
        let mut seen = vec![false; n_features];
        for &i in tiers.iter().flatten() {
            if i >= n_features {
                return Err(Error::InvalidConfig(format!(
                    "tier feature index {i} out of range for {n_features} features"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidConfig(format!("feature {i} appears in two tiers")));
            }
            seen[i] = true;
        }
        Ok(SensitivityTiers { tiers, n_features })
    }

    pub fn tiers(&self) -> &[Vec<usize>] {
        &self.tiers
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Features ranked strictly below tier `t`, including untiered ones.
    pub fn below(&self, t: usize) -> Vec<usize> {
        let mut above = vec![false; self.n_features];
        for &i in self.tiers[..=t].iter().flatten() {
            above[i] = true;
        }
        (0..self.n_features).filter(|&i| !above[i]).collect()
    }
}

/// Target shape for the score distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetDistribution {
    #[default]
    None,
    Gaussian { mu: f64, sigma: f64 },
    Exponential { lambda: f64 },
}

impl TargetDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TargetDistribution::None => Ok(()),
            TargetDistribution::Gaussian { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(Error::validation("$.distribution.mu", "mu must be finite"));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::validation("$.distribution.sigma", "sigma must be > 0"));
                }
                Ok(())
            }
            TargetDistribution::Exponential { lambda } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::validation("$.distribution.lambda", "lambda must be > 0"));
                }
                Ok(())
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, TargetDistribution::None)
    }
}

/// Closed-form `KL(N(mu1, sigma1^2) || N(mu2, sigma2^2))`.
pub fn kl_gaussian_value(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(Error::domain("kl_gaussian", "standard deviations must be positive"));
    }
    Ok((sigma2 / sigma1).ln() + (sigma1 * sigma1 + (mu1 - mu2).powi(2)) / (2.0 * sigma2 * sigma2) - 0.5)
}

/// Divergence of `N(mu1, sigma1^2)` from `Exp(lambda)` in the cross-entropy
/// form `-1/2 - log(2 pi sigma1^2)/2 - log(lambda) + mu1 lambda`. Can be negative.
pub fn kl_exponential_value(mu1: f64, sigma1: f64, lambda: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && lambda > 0.0) {
        return Err(Error::domain("kl_exponential", "sigma and lambda must be positive"));
    }
    Ok(-0.5 - 0.5 * (2.0 * PI * sigma1 * sigma1).ln() - lambda.ln() + mu1 * lambda)
}

/// Mean hinge penalty for scores outside `[a, b]`; `squared` squares each
/// (nonnegative) hinge term.
pub fn bound_loss(g: &mut Graph, scores: NodeId, a: f64, b: f64, squared: bool) -> Result<NodeId> {
    if !(b > a) {
        return Err(Error::InvalidConfig(format!("bounds [{a}, {b}] need a < b")));
    }
    let neg = g.neg(scores)?;
    let below = g.shift(neg, a)?;
    let mut below = g.relu(below)?;
    let above = g.shift(scores, -b)?;
    let mut above = g.relu(above)?;
    if squared {
        below = g.square(below)?;
        above = g.square(above)?;
    }
    let both = g.add(below, above)?;
    g.mean(both)
}

/// Mean absolute deviation of the scores from the mode `m`.
pub fn mode_loss(g: &mut Graph, scores: NodeId, m: f64) -> Result<NodeId> {
    let d = g.shift(scores, -m)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Per sample and per tier: (sum of gradients of lower-ranked features) /
/// (eps + sum of gradients of the tier's features); summed over tiers and
/// averaged over the batch.
pub fn sensitivity_loss(g: &mut Graph, grads: NodeId, tiers: &SensitivityTiers) -> Result<NodeId> {
    let n = g.value(grads).cols();
    if n != tiers.n_features() {
        return Err(Error::shape(
            "sensitivity_loss",
            format!("gradients have {n} columns, tiers cover {}", tiers.n_features()),
        ));
    }
    let selector = |g: &mut Graph, idx: &[usize]| {
        let mut t = Tensor::zeros(n, 1);
        for &i in idx {
            t.set(i, 0, 1.0);
        }
        g.constant(t)
    };
    let mut total: Option<NodeId> = None;
    for (t, tier) in tiers.tiers().iter().enumerate() {
        let lower = tiers.below(t);
        if lower.is_empty() {
            continue;
        }
        let num_sel = selector(g, &lower)?;
        let num = g.matmul(grads, num_sel)?;
        let den_sel = selector(g, tier)?;
        let den = g.matmul(grads, den_sel)?;
        let den = g.shift(den, SENSITIVITY_EPS)?;
        let term = g.div(num, den)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(per_sample) => g.mean(per_sample),
        // every feature is in a tier and the last tier has nothing below it
        None => g.constant(Tensor::scalar(0.0)),
    }
}

/// Mean and floored population standard deviation of a score batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchMoments {
    pub mu: NodeId,
    pub sigma: NodeId,
}

pub fn batch_moments(g: &mut Graph, scores: NodeId) -> Result<BatchMoments> {
    let n = g.value(scores).len();
    if n < 2 {
        return Err(Error::Contract(format!("batch moments need >= 2 scores, got {n}")));
    }
    if g.value(scores).cols() != 1 {
        return Err(Error::shape("batch_moments", "scores must be a column"));
    }
    let mu = g.mean(scores)?;
    let neg_mu = g.neg(mu)?;
    let centered = g.broadcast_add_row(scores, neg_mu)?;
    let sq = g.square(centered)?;
    let var = g.mean(sq)?;
    // max(sqrt(v), f) == sqrt(max(v, f^2)); flooring first keeps sqrt' finite
    let var = g.clamp_min(var, SIGMA_FLOOR * SIGMA_FLOOR)?;
    let sigma = g.sqrt(var)?;
    Ok(BatchMoments { mu, sigma })
}

/// Reverse KL from the batch Gaussian to `N(mu2, sigma2^2)`.
pub fn kl_gaussian(g: &mut Graph, q: BatchMoments, mu2: f64, sigma2: f64) -> Result<NodeId> {
    if !(sigma2 > 0.0) {
        return Err(Error::domain("kl_gaussian", "target sigma must be positive"));
    }
    if !(g.value(q.sigma).item() > 0.0) {
        return Err(Error::domain("kl_gaussian", "batch sigma must be positive"));
    }
    let log_sigma1 = g.log(q.sigma)?;
    let var1 = g.square(q.sigma)?;
    let dmu = g.shift(q.mu, -mu2)?;
    let dmu2 = g.square(dmu)?;
    let spread = g.add(var1, dmu2)?;
    let spread = g.scale(spread, 1.0 / (2.0 * sigma2 * sigma2))?;
    let kl = g.sub(spread, log_sigma1)?;
    g.shift(kl, sigma2.ln() - 0.5)
}

/// Divergence from the batch Gaussian to `Exp(lambda)`.
pub fn kl_exponential(g: &mut Graph, q: BatchMoments, lambda: f64) -> Result<NodeId> {
    if !(lambda > 0.0) {
        return Err(Error::domain("kl_exponential", "lambda must be positive"));
    }
    if !(g.value(q.sigma).item() > 0.0) {
        return Err(Error::domain("kl_exponential", "batch sigma must be positive"));
    }
    let log_sigma1 = g.log(q.sigma)?;
    let linear = g.scale(q.mu, lambda)?;
    let kl = g.sub(linear, log_sigma1)?;
    g.shift(kl, -0.5 - 0.5 * (2.0 * PI).ln() - lambda.ln())
}

/// Dispatches on the target kind; `None` when no target is configured.
pub fn distribution_loss(g: &mut Graph, q: BatchMoments, target: &TargetDistribution) -> Result<Option<NodeId>> {
    match *target {
        TargetDistribution::None => Ok(None),
        TargetDistribution::Gaussian { mu, sigma } => kl_gaussian(g, q, mu, sigma).map(Some),
        TargetDistribution::Exponential { lambda } => kl_exponential(g, q, lambda).map(Some),
    }
}

/// Scalar loss nodes of the enabled constraints.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub bound: Option<NodeId>,
    pub sensitivity: Option<NodeId>,
    pub distribution: Option<NodeId>,
    pub mode: Option<NodeId>,
}

impl LossComponents {
    pub fn any(&self) -> bool {
        self.bound.is_some() || self.sensitivity.is_some() || self.distribution.is_some() || self.mode.is_some()
    }
}

/// `alpha*BL + beta*SL + gamma*KL + delta*ML` over the enabled components.
pub fn total_loss(g: &mut Graph, parts: &LossComponents, w: &LossWeights) -> Result<NodeId> {
    let weighted = [
        (parts.bound, w.alpha),
        (parts.sensitivity, w.beta),
        (parts.distribution, w.gamma),
        (parts.mode, w.delta),
    ];
    let mut total: Option<NodeId> = None;
    for (node, weight) in weighted {
        let Some(node) = node else { continue };
        let term = g.scale(node, weight)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidConfig("no loss component is enabled".into()))
}
