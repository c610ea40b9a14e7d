//! Scoring functions learned without labels.
//!
//! A small monotone network is trained against expert constraints instead of
//! targets: score bounds, a preferred mode, a target score distribution and
//! tiers of feature importance expressed through input gradients. The crate
//! carries its own reverse-mode differentiation engine so that losses built
//! from input gradients can themselves be differentiated.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, NodeId, Op};
pub use config::{preset, ConstraintConfig, FeatureSpec};
pub use data::{load_csv, synth_generate, Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{MetricsReport, KdeCurve};
pub use features::{Direction, FeaturePipeline};
pub use losses::{LossWeights, SensitivityTiers, TargetDistribution};
pub use model::{MonotoneMlp, ScoringModel};
pub use pipeline::{run_training, TrainOptions, TrainOutcome};
pub use tensor::Tensor;
pub use train::{train, train_supervised, TrainConfig, TrainReport};
