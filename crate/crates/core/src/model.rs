//! The monotone scoring network and its persisted form.
//!
//! Weights are learned in the log domain: the effective weight of every dense
//! layer is `exp(omega)`, which is strictly positive, so with the nondecreasing
//! ELU activation the network is nondecreasing in every input. With the
//! monotone flag off the stored matrices are used as raw weights.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::FeaturePipeline;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Three dense layers: `n -> h1 -> h2 -> 1`, ELU on the hidden layers and a
/// linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneMlp {
    layer_dims: [usize; 4],
    monotone: bool,
    weights: [Tensor; 3],
    biases: [Tensor; 3],
}

impl MonotoneMlp {
    pub fn init(n_features: usize, hidden: [usize; 2], monotone: bool, seed: u64) -> Result<Self> {
        if n_features == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes must be positive, got {n_features} -> {hidden:?} -> 1"
            )));
        }
        let dims = [n_features, hidden[0], hidden[1], 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = std::array::from_fn(|k| {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    if monotone {
                        (1.0 / fan_in as f64).ln() + rng.random_range(-0.5..0.5)
                    } else {
                        // Glorot uniform for raw weights
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        rng.random_range(-limit..limit)
                    }
                })
                .collect();
            Tensor::from_raw(fan_in, fan_out, data)
        });
        let biases = std::array::from_fn(|k| Tensor::zeros(1, dims[k + 1]));
        Ok(MonotoneMlp {
            layer_dims: dims,
            monotone,
            weights,
            biases,
        })
    }

    /// Assembles a network from explicit matrices (`weights[k]` is
    /// `dims[k] x dims[k+1]`, `biases[k]` is `1 x dims[k+1]`).
    pub fn from_parts(monotone: bool, weights: [Tensor; 3], biases: [Tensor; 3]) -> Result<Self> {
        let dims = [weights[0].rows(), weights[0].cols(), weights[1].cols(), weights[2].cols()];
        if dims.contains(&0) || dims[3] != 1 {
            return Err(Error::InvalidConfig(format!("invalid layer sizes {dims:?}")));
        }
        for k in 0..3 {
            if weights[k].shape() != (dims[k], dims[k + 1]) || biases[k].shape() != (1, dims[k + 1]) {
                return Err(Error::shape(
                    "from_parts",
                    format!("layer {k}: weight {:?}, bias {:?}", weights[k].shape(), biases[k].shape()),
                ));
            }
        }
        Ok(MonotoneMlp {
            layer_dims: dims,
            monotone,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> [usize; 4] {
        self.layer_dims
    }

    pub fn n_features(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    /// Stored weight matrices (log-domain when monotone).
    pub fn weights(&self) -> &[Tensor; 3] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor; 3] {
        &self.biases
    }

    /// Weights as used in the forward pass.
    pub fn effective_weights(&self) -> [Tensor; 3] {
        std::array::from_fn(|k| {
            if self.monotone {
                self.weights[k].map(f64::exp)
            } else {
                self.weights[k].clone()
            }
        })
    }

    /// Trainable tensors in a fixed order: w1, b1, w2, b2, w3, b3.
    pub fn parameters(&self) -> [&Tensor; 6] {
        [
            &self.weights[0],
            &self.biases[0],
            &self.weights[1],
            &self.biases[1],
            &self.weights[2],
            &self.biases[2],
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 6] {
        let [w1, w2, w3] = &mut self.weights;
        let [b1, b2, b3] = &mut self.biases;
        [w1, b1, w2, b2, w3, b3]
    }

    /// Adds the forward pass over `x` to `g`. With `trainable` the weights and
    /// biases become parameter nodes, otherwise constants.
    pub fn build(&self, g: &mut Graph, x: &Tensor, trainable: bool) -> Result<ModelGraph> {
        if x.cols() != self.n_features() {
            return Err(Error::shape(
                "forward",
                format!("model expects {} features, input has {}", self.n_features(), x.cols()),
            ));
        }
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.parameter(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut params = Vec::with_capacity(6);
        for t in self.parameters() {
            params.push(leaf(g, t)?);
        }
        let params: [NodeId; 6] = params.try_into().expect("six parameters");
        let mut effective = [params[0], params[2], params[4]];
        if self.monotone {
            for w in &mut effective {
                *w = g.exp(*w)?;
            }
        }
        let input = g.constant(x.clone())?;
        let z1 = g.matmul(input, effective[0])?;
        let z1 = g.broadcast_add_row(z1, params[1])?;
        let a1 = g.elu(z1)?;
        let z2 = g.matmul(a1, effective[1])?;
        let z2 = g.broadcast_add_row(z2, params[3])?;
        let a2 = g.elu(z2)?;
        let out = g.matmul(a2, effective[2])?;
        let scores = g.broadcast_add_row(out, params[5])?;
        Ok(ModelGraph {
            params,
            effective,
            pre_activations: [z1, z2],
            scores,
            batch: x.rows(),
        })
    }

    /// Score node (`batch x 1`) with trainable parameters.
    pub fn forward(&self, x: &Tensor, g: &mut Graph) -> Result<NodeId> {
        Ok(self.build(g, x, true)?.scores)
    }

    /// Per-sample input gradients (`batch x n`) as differentiable nodes.
    pub fn input_gradients(&self, x: &Tensor, g: &mut Graph) -> Result<NodeId> {
        self.build(g, x, true)?.input_gradients(g)
    }

    /// Plain inference without gradient bookkeeping.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let built = self.build(&mut g, x, false)?;
        Ok(g.value(built.scores).data().to_vec())
    }
}

/// Node handles of one forward pass inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct ModelGraph {
    params: [NodeId; 6],
    effective: [NodeId; 3],
    pre_activations: [NodeId; 2],
    scores: NodeId,
    batch: usize,
}

impl ModelGraph {
    pub fn scores(&self) -> NodeId {
        self.scores
    }

    /// Same order as [`MonotoneMlp::parameters`].
    pub fn parameters(&self) -> [NodeId; 6] {
        self.params
    }

    /// Builds `grad_x f = W1 . diag(elu'(z1)) . W2 . diag(elu'(z2)) . w3` for
    /// every row as graph nodes, so the result can itself be differentiated
    /// with respect to the parameters.
    pub fn input_gradients(&self, g: &mut Graph) -> Result<NodeId> {
        let [w1, w2, w3] = self.effective;
        let [z1, z2] = self.pre_activations;
        let ones = g.constant(Tensor::filled(self.batch, 1, 1.0))?;
        let w3t = g.transpose(w3)?;
        let back2 = g.matmul(ones, w3t)?;
        let d2 = g.elu_prime(z2)?;
        let back2 = g.mul(back2, d2)?;
        let w2t = g.transpose(w2)?;
        let back1 = g.matmul(back2, w2t)?;
        let d1 = g.elu_prime(z1)?;
        let back1 = g.mul(back1, d1)?;
        let w1t = g.transpose(w1)?;
        g.matmul(back1, w1t)
    }
}

/// Affine map of observed score range `[from_min, from_max]` onto `[to_min, to_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rescale {
    pub from_min: f64,
    pub from_max: f64,
    pub to_min: f64,
    pub to_max: f64,
}

impl Rescale {
    pub fn fit(scores: &[f64], a: f64, b: f64) -> Result<Self> {
        if !(b > a) {
            return Err(Error::InvalidConfig(format!("rescale target [{a}, {b}] is empty")));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::DegenerateScores(
                "cannot rescale scores without spread".into(),
            ));
        }
        Ok(Rescale {
            from_min: min,
            from_max: max,
            to_min: a,
            to_max: b,
        })
    }

    pub fn apply(&self, s: f64) -> f64 {
        self.to_min + (s - self.from_min) * (self.to_max - self.to_min) / (self.from_max - self.from_min)
    }
}

/// Affinely maps the observed range of `scores` onto `[a, b]`.
pub fn rescale_scores(scores: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    let r = Rescale::fit(scores, a, b)?;
    Ok(scores.iter().map(|&s| r.apply(s)).collect())
}

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk JSON form of a trained scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub layer_dims: [usize; 4],
    pub monotone_flag: bool,
    /// Row-major weight matrices; raw weights when `monotone_flag` is false.
    pub log_weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub feature_pipeline: FeaturePipeline,
    pub constraint_config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale: Option<Rescale>,
}

/// A trained network together with its input pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringModel {
    pub network: MonotoneMlp,
    pub pipeline: FeaturePipeline,
    pub config_digest: String,
    pub rescale: Option<Rescale>,
}

impl ScoringModel {
    /// Scores raw (untransformed) data.
    pub fn score_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        let x = self.pipeline.transform_tensor(data)?;
        let raw = self.network.score(&x)?;
        Ok(match &self.rescale {
            Some(r) => raw.into_iter().map(|s| r.apply(s)).collect(),
            None => raw,
        })
    }

    pub fn to_document(&self) -> ModelDocument {
        let net = &self.network;
        ModelDocument {
            schema_version: SCHEMA_VERSION,
            layer_dims: net.layer_dims,
            monotone_flag: net.monotone,
            log_weights: net.weights.iter().map(|w| w.data().to_vec()).collect(),
            biases: net.biases.iter().map(|b| b.data().to_vec()).collect(),
            feature_pipeline: self.pipeline.clone(),
            constraint_config_digest: self.config_digest.clone(),
            rescale: self.rescale,
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported model schema version {}",
                doc.schema_version
            )));
        }
        let dims = doc.layer_dims;
        if doc.log_weights.len() != 3 || doc.biases.len() != 3 {
            return Err(Error::Format("model needs exactly 3 layers".into()));
        }
        if dims[3] != 1 || dims.contains(&0) {
            return Err(Error::Format(format!("invalid layer sizes {dims:?}")));
        }
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for k in 0..3 {
            weights.push(Tensor::new(dims[k], dims[k + 1], doc.log_weights[k].clone())?);
            biases.push(Tensor::new(1, dims[k + 1], doc.biases[k].clone())?);
        }
        let weights: [Tensor; 3] = weights.try_into().expect("three layers");
        let biases: [Tensor; 3] = biases.try_into().expect("three layers");
        let network = MonotoneMlp::from_parts(doc.monotone_flag, weights, biases)
            .map_err(|e| Error::Format(e.to_string()))?;
        let p = &doc.feature_pipeline;
        if p.feature_names.len() != dims[0]
            || p.directions.len() != dims[0]
            || p.stats.min.len() != dims[0]
            || p.stats.max.len() != dims[0]
        {
            return Err(Error::Format("feature pipeline does not match input width".into()));
        }
        Ok(ScoringModel {
            network,
            pipeline: doc.feature_pipeline,
            config_digest: doc.constraint_config_digest,
            rescale: doc.rescale,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        ScoringModel::from_document(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ScoringModel::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Direction, NormalizationStats};
    use rand::Rng;

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Model with small random biases so the zero-bias symmetry is broken.
    fn perturbed(monotone: bool, seed: u64) -> MonotoneMlp {
        let mut m = MonotoneMlp::init(4, [8, 8], monotone, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in &mut m.biases {
            for v in b.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    #[test]
    fn init_is_seeded_and_positive() {
        let a = MonotoneMlp::init(4, DEFAULT_HIDDEN, true, 7).unwrap();
        let b = MonotoneMlp::init(4, DEFAULT_HIDDEN, true, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, MonotoneMlp::init(4, DEFAULT_HIDDEN, true, 8).unwrap());
        for w in a.effective_weights() {
            assert!(w.data().iter().all(|&v| v > 0.0));
        }
        // log(1/fan_in) +- 0.5
        let lo = (1.0f64 / 4.0).ln() - 0.5;
        assert!(a.weights()[0].data().iter().all(|&v| v >= lo && v < lo + 1.0));
        assert!(a.biases().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        assert!(matches!(MonotoneMlp::init(0, DEFAULT_HIDDEN, true, 1), Err(Error::InvalidConfig(_))));
        assert!(matches!(MonotoneMlp::init(3, [0, 4], true, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_input_gives_zero_score() {
        let m = MonotoneMlp::init(5, [6, 3], true, 2).unwrap();
        assert_eq!(m.score(&Tensor::zeros(1, 5)).unwrap(), vec![0.0]);
    }

    #[test]
    fn batch_shape_and_feature_mismatch() {
        let m = MonotoneMlp::init(4, [8, 8], true, 2).unwrap();
        let mut g = Graph::new();
        let s = m.forward(&Tensor::zeros(64, 4), &mut g).unwrap();
        assert_eq!(g.value(s).shape(), (64, 1));
        assert!(matches!(m.score(&Tensor::zeros(2, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn monotone_in_every_input() {
        let m = perturbed(true, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(0.0..0.5)).collect();
            let fx = m.score(&Tensor::new(1, 4, x).unwrap()).unwrap()[0];
            let fy = m.score(&Tensor::new(1, 4, y).unwrap()).unwrap()[0];
            assert!(fy >= fx - 1e-9);
        }
    }

    #[test]
    fn input_gradients_positive_when_monotone() {
        let m = perturbed(true, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input(&mut rng, 1000, 4);
        let mut g = Graph::new();
        let grads = m.input_gradients(&x, &mut g).unwrap();
        assert_eq!(g.value(grads).shape(), (1000, 4));
        assert!(g.value(grads).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn unit_chain_gradient_is_one() {
        let ones = |r, c| Tensor::zeros(r, c);
        let m = MonotoneMlp::from_parts(
            true,
            [ones(3, 1), ones(1, 1), ones(1, 1)],
            [Tensor::zeros(1, 1), Tensor::zeros(1, 1), Tensor::zeros(1, 1)],
        )
        .unwrap();
        let x = Tensor::new(1, 3, vec![0.2, 0.3, 0.4]).unwrap();
        let mut g = Graph::new();
        let grads = m.input_gradients(&x, &mut g).unwrap();
        assert_eq!(g.value(grads).data(), &[1.0, 1.0, 1.0]);
        assert!((m.score(&x).unwrap()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for monotone in [true, false] {
            let m = perturbed(monotone, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = random_input(&mut rng, 50, 4);
            let mut g = Graph::new();
            let grads = m.input_gradients(&x, &mut g).unwrap();
            let grads = g.value(grads).clone();
            let h = 1e-6;
            for i in 0..50 {
                for j in 0..4 {
                    let mut up = x.row(i).to_vec();
                    let mut down = up.clone();
                    up[j] += h;
                    down[j] -= h;
                    let fu = m.score(&Tensor::new(1, 4, up).unwrap()).unwrap()[0];
                    let fd = m.score(&Tensor::new(1, 4, down).unwrap()).unwrap()[0];
                    let fd_grad = (fu - fd) / (2.0 * h);
                    let analytic = grads.get(i, j);
                    let rel = (analytic - fd_grad).abs() / analytic.abs().max(fd_grad.abs()).max(1e-3);
                    assert!(rel < 1e-4, "row {i} col {j}: {analytic} vs {fd_grad}");
                }
            }
        }
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_scores(&[2.0, 4.0, 6.0], 0.0, 10.0).unwrap(), vec![0.0, 5.0, 10.0]);
        assert_eq!(rescale_scores(&[0.0, 3.0, 10.0], 0.0, 10.0).unwrap(), vec![0.0, 3.0, 10.0]);
        assert!(matches!(rescale_scores(&[5.0, 5.0, 5.0], 0.0, 1.0), Err(Error::DegenerateScores(_))));
        let s = [3.0, -1.0, 8.0, 2.5];
        let r = rescale_scores(&s, 40.0, 100.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s[i] < s[j], r[i] < r[j]);
            }
        }
    }

    fn scoring_model(monotone: bool) -> ScoringModel {
        ScoringModel {
            network: perturbed(monotone, 11),
            pipeline: FeaturePipeline {
                feature_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
                directions: vec![Direction::Positive, Direction::Negative, Direction::ConvexLinear, Direction::Positive],
                stats: NormalizationStats {
                    min: vec![0.0, 1.0, 2.0, 3.0],
                    max: vec![1.0, 2.0, 3.0, 4.0],
                },
            },
            config_digest: "abc".into(),
            rescale: Some(Rescale {
                from_min: -0.1,
                from_max: 1.0 / 3.0,
                to_min: 0.0,
                to_max: 10.0,
            }),
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        for monotone in [true, false] {
            let m = scoring_model(monotone);
            let text = m.to_json().unwrap();
            let back = ScoringModel::from_json(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_json().unwrap(), text);
            let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(doc["monotone_flag"], monotone);
            assert_eq!(doc["schema_version"], SCHEMA_VERSION);
        }
    }

    #[test]
    fn malformed_documents_rejected() {
        let m = scoring_model(true);
        let mut doc = m.to_document();
        doc.schema_version = 99;
        assert!(matches!(ScoringModel::from_document(doc), Err(Error::Format(_))));
        let mut doc = m.to_document();
        doc.log_weights[1].pop();
        assert!(ScoringModel::from_document(doc).is_err());
        let mut doc = m.to_document();
        doc.feature_pipeline.feature_names.pop();
        assert!(matches!(ScoringModel::from_document(doc), Err(Error::Format(_))));
    }
}
