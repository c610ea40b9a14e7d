//! Mini-batch training against the weighted constraint objective, and the
//! supervised regression baseline that shares the same loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::config::ConstraintConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossComponents, SensitivityTiers};
use crate::model::{MonotoneMlp, DEFAULT_HIDDEN};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub shuffle: bool,
    pub hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 200,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 7,
            shuffle: true,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::validation("$.train.batch_size", "batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("$.train.epochs", "epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("$.train.learning_rate", "learning rate must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("$.train.hidden", "hidden widths must be >= 1"));
        }
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::validation(
                        "$.train.optimizer",
                        "adam needs 0 <= beta < 1 and eps > 0",
                    ));
                }
            }
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::validation("$.train.optimizer.momentum", "momentum must be in [0, 1)"));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: match kind {
                OptimizerKind::Adam { .. } => sizes.iter().map(|&n| vec![0.0; n]).collect(),
                OptimizerKind::Sgd { .. } => Vec::new(),
            },
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let vel = &mut self.first[k];
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        vel[i] = momentum * vel[i] + gi;
                        *w -= self.lr * vel[i];
                    }
                }
            }
        }
    }
}

/// Mean losses over the batches of one pass. Components that were not
/// computed are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSnapshot {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

impl LossSnapshot {
    fn describe(&self) -> String {
        let mut parts = vec![format!("total={}", self.total)];
        for (name, v) in [
            ("bound", self.bound),
            ("sensitivity", self.sensitivity),
            ("distribution", self.distribution),
            ("mode", self.mode),
            ("mse", self.mse),
        ] {
            if let Some(v) = v {
                parts.push(format!("{name}={v}"));
            }
        }
        parts.join(" ")
    }
}

#[derive(Default)]
struct Accumulator {
    batches: usize,
    sums: LossSnapshot,
}

impl Accumulator {
    fn add(&mut self, s: &LossSnapshot) {
        fn acc(a: &mut Option<f64>, b: Option<f64>) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        }
        self.batches += 1;
        self.sums.total += s.total;
        acc(&mut self.sums.bound, s.bound);
        acc(&mut self.sums.sensitivity, s.sensitivity);
        acc(&mut self.sums.distribution, s.distribution);
        acc(&mut self.sums.mode, s.mode);
        acc(&mut self.sums.mse, s.mse);
    }

    fn mean(self) -> LossSnapshot {
        let n = self.batches.max(1) as f64;
        let div = |v: Option<f64>| v.map(|x| x / n);
        LossSnapshot {
            total: self.sums.total / n,
            bound: div(self.sums.bound),
            sensitivity: div(self.sums.sensitivity),
            distribution: div(self.sums.distribution),
            mode: div(self.sums.mode),
            mse: div(self.sums.mse),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the untrained model over the training set.
    pub initial: LossSnapshot,
    /// Running batch-mean losses, one entry per epoch.
    pub epochs: Vec<LossSnapshot>,
    /// Loss of the trained model over the training set.
    #[serde(rename = "final")]
    pub final_loss: LossSnapshot,
    /// SHA-256 of the final parameter bytes.
    pub parameter_digest: String,
    pub duration_secs: f64,
}

/// What a batch is trained against.
enum Objective<'a> {
    Constraints {
        config: &'a ConstraintConfig,
        tiers: Option<SensitivityTiers>,
    },
    Regression,
}

impl Objective<'_> {
    /// Builds the batch loss; returns the total node and the component values.
    fn build(&self, g: &mut Graph, model: &MonotoneMlp, x: &Tensor, y: Option<&Tensor>) -> Result<(NodeId, [NodeId; 6], LossSnapshot)> {
        let built = model.build(g, x, true)?;
        let scores = built.scores();
        let mut snap = LossSnapshot::default();
        let total = match self {
            Objective::Regression => {
                let y = y.ok_or_else(|| Error::Config("regression needs labels".into()))?;
                let target = g.constant(y.clone())?;
                let diff = g.sub(scores, target)?;
                let sq = g.square(diff)?;
                let mse = g.mean(sq)?;
                snap.mse = Some(g.value(mse).item());
                mse
            }
            Objective::Constraints { config, tiers } => {
                let w = config.weights;
                let mut parts = LossComponents::default();
                if let (Some([a, b]), true) = (config.bounds, w.alpha > 0.0) {
                    parts.bound = Some(losses::bound_loss(g, scores, a, b, config.squared_bounds)?);
                }
                if let (Some(tiers), true) = (tiers, w.beta > 0.0) {
                    let grads = built.input_gradients(g)?;
                    parts.sensitivity = Some(losses::sensitivity_loss(g, grads, tiers)?);
                }
                if !config.distribution.is_none() && w.gamma > 0.0 {
                    let q = losses::batch_moments(g, scores)?;
                    parts.distribution = losses::distribution_loss(g, q, &config.distribution)?;
                }
                if let (Some(m), true) = (config.mode, w.delta > 0.0) {
                    parts.mode = Some(losses::mode_loss(g, scores, m)?);
                }
                let value = |g: &Graph, n: Option<NodeId>| n.map(|n| g.value(n).item());
                snap.bound = value(g, parts.bound);
                snap.sensitivity = value(g, parts.sensitivity);
                snap.distribution = value(g, parts.distribution);
                snap.mode = value(g, parts.mode);
                if parts.any() {
                    losses::total_loss(g, &parts, &w)?
                } else {
                    g.constant(Tensor::scalar(0.0))?
                }
            }
        };
        snap.total = g.value(total).item();
        Ok((total, built.parameters(), snap))
    }
}

fn batch_tensors(data: &Dataset, rows: &[usize], labels: Option<&[f64]>) -> Result<(Tensor, Option<Tensor>)> {
    let n = data.n_features();
    let mut values = Vec::with_capacity(rows.len() * n);
    for &i in rows {
        values.extend_from_slice(data.row(i));
    }
    let x = Tensor::new(rows.len(), n, values)?;
    let y = match labels {
        Some(l) => Some(Tensor::new(rows.len(), 1, rows.iter().map(|&i| l[i]).collect())?),
        None => None,
    };
    Ok((x, y))
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    // a trailing batch of one row cannot provide batch moments
    order.chunks(batch_size).filter(|c| c.len() >= 2)
}

fn evaluate(model: &MonotoneMlp, data: &Dataset, labels: Option<&[f64]>, objective: &Objective, batch_size: usize) -> Result<LossSnapshot> {
    let order: Vec<usize> = (0..data.n_rows()).collect();
    let mut acc = Accumulator::default();
    for rows in batches(&order, batch_size) {
        let (x, y) = batch_tensors(data, rows, labels)?;
        let mut g = Graph::new();
        let (_, _, snap) = objective.build(&mut g, model, &x, y.as_ref())?;
        acc.add(&snap);
    }
    Ok(acc.mean())
}

pub fn parameter_digest(model: &MonotoneMlp) -> String {
    let mut h = Sha256::new();
    for p in model.parameters() {
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn run(mut model: MonotoneMlp, data: &Dataset, labels: Option<&[f64]>, objective: Objective, cfg: &TrainConfig) -> Result<(MonotoneMlp, TrainReport)> {
    cfg.validate()?;
    if data.n_features() != model.n_features() {
        return Err(Error::shape(
            "train",
            format!("model expects {} features, data has {}", model.n_features(), data.n_features()),
        ));
    }
    if data.n_rows() < 2 {
        return Err(Error::InvalidInput("training needs at least 2 rows".into()));
    }
    let started = Instant::now();
    let initial = evaluate(&model, data, labels, &objective, cfg.batch_size)?;
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.n_rows()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut acc = Accumulator::default();
        for rows in batches(&order, cfg.batch_size) {
            let (x, y) = batch_tensors(data, rows, labels)?;
            let mut g = Graph::new();
            let (total, params, snap) = match objective.build(&mut g, &model, &x, y.as_ref()) {
                Ok(r) => r,
                Err(Error::Domain { op, detail }) => {
                    return Err(Error::Divergence {
                        step,
                        components: format!("non-finite value in {op}: {detail}"),
                    })
                }
                Err(e) => return Err(e),
            };
            if !snap.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    components: snap.describe(),
                });
            }
            g.backward(total)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| g.grad(p)).collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    components: format!("non-finite gradient; {}", snap.describe()),
                });
            }
            opt.step(&mut model.parameters_mut(), &grads);
            if model.parameters().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    components: format!("non-finite parameters; {}", snap.describe()),
                });
            }
            acc.add(&snap);
            step += 1;
        }
        let mean = acc.mean();
        log::debug!("epoch {epoch}: {}", mean.describe());
        epochs.push(mean);
    }

    let final_loss = match evaluate(&model, data, labels, &objective, cfg.batch_size) {
        Ok(s) => s,
        Err(Error::Domain { op, detail }) => {
            return Err(Error::Divergence {
                step,
                components: format!("non-finite value in {op}: {detail}"),
            })
        }
        Err(e) => return Err(e),
    };
    let report = TrainReport {
        initial,
        epochs,
        final_loss,
        parameter_digest: parameter_digest(&model),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Trains `model` on already normalized and direction-transformed features.
pub fn train(model: MonotoneMlp, data: &Dataset, constraints: &ConstraintConfig, cfg: &TrainConfig) -> Result<(MonotoneMlp, TrainReport)> {
    constraints.validate()?;
    if constraints.features.len() != data.n_features() {
        return Err(Error::Config(format!(
            "config lists {} features, data has {}",
            constraints.features.len(),
            data.n_features()
        )));
    }
    let w = constraints.weights;
    if w.alpha == 0.0 && w.beta == 0.0 && w.gamma == 0.0 && w.delta == 0.0 {
        log::warn!("all loss weights are zero; training will not change the model");
    }
    let objective = Objective::Constraints {
        config: constraints,
        tiers: constraints.tiers()?,
    };
    run(model, data, None, objective, cfg)
}

/// Regression on the labels of `data`. Labels are standardized for the loop
/// and the affine map is folded back into the output layer afterwards, so the
/// returned network predicts on the label scale.
pub fn train_supervised(model: MonotoneMlp, data: &Dataset, cfg: &TrainConfig) -> Result<(MonotoneMlp, TrainReport)> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("supervised training needs a label column".into()))?;
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let std = (labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 0.0 { std } else { 1.0 };
    let standardized: Vec<f64> = labels.iter().map(|y| (y - mean) / scale).collect();

    let (mut model, report) = run(model, data, Some(&standardized), Objective::Regression, cfg)?;
    let monotone = model.is_monotone();
    let [.., w3, b3] = model.parameters_mut();
    for w in w3.data_mut() {
        if monotone {
            *w += scale.ln();
        } else {
            *w *= scale;
        }
    }
    for b in b3.data_mut() {
        *b = *b * scale + mean;
    }
    Ok((model, report))
}
