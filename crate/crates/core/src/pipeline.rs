//! End-to-end workflows: fit the feature pipeline, split, train, optionally
//! rescale, and the loss-combination ablation built on top of that.

use serde::{Deserialize, Serialize};

use crate::config::{Components, ConstraintConfig};
use crate::data::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::features::FeaturePipeline;
use crate::model::{MonotoneMlp, Rescale, ScoringModel};
use crate::train::{train, train_supervised, TrainReport};

pub const TRAIN_FRACTION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub monotone: bool,
    /// Regress on the dataset labels instead of the constraints.
    pub supervised: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            monotone: true,
            supervised: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ScoringModel,
    pub report: TrainReport,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Normalizes and transforms `raw` with statistics from all of its rows,
/// splits it with the training seed and trains on the training part.
pub fn run_training(raw: &Dataset, config: &ConstraintConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = &config.train;
    let (pipeline, transformed) = FeaturePipeline::fit(raw, &config.feature_names(), &config.directions())?;
    let (train_rows, test_rows) = split_indices(transformed.n_rows(), TRAIN_FRACTION, cfg.seed)?;
    let train_set = transformed.subset(&train_rows);

    let monotone = opts.monotone && !opts.supervised;
    let network = MonotoneMlp::init(train_set.n_features(), cfg.hidden, monotone, cfg.seed)?;
    let (network, report) = if opts.supervised {
        train_supervised(network, &train_set, cfg)?
    } else {
        train(network, &train_set, config, cfg)?
    };

    let rescale = match (config.rescale_after_training && !opts.supervised, config.bounds) {
        (true, Some([a, b])) => Some(Rescale::fit(&network.score(&train_set.to_tensor()?)?, a, b)?),
        (true, None) => {
            log::warn!("rescale_after_training is set but no bounds are configured; skipping");
            None
        }
        _ => None,
    };
    let model = ScoringModel {
        network,
        pipeline,
        config_digest: config.digest(),
        rescale,
    };
    Ok(TrainOutcome {
        model,
        report,
        train_rows,
        test_rows,
    })
}

/// One row of the loss-combination comparison.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCase {
    pub case: u32,
    pub constraint: String,
    pub monotone: bool,
    pub supervised: bool,
}

const COMBINATIONS: [(&str, bool, bool, bool); 7] = [
    // (label, bound, sensitivity, distribution)
    ("Distribution", false, false, true),
    ("Bound", true, false, false),
    ("Sensitivity", false, true, false),
    ("Bound + Distribution", true, false, true),
    ("Distribution + Sensitivity", false, true, true),
    ("Bound + Sensitivity", true, true, false),
    ("All losses together", true, true, true),
];

/// Case 2 is the supervised baseline, cases 3-9 are the seven loss
/// combinations without monotonicity and 10-16 the same with it.
pub fn ablation_cases() -> Vec<AblationCase> {
    let mut cases = vec![AblationCase {
        case: 2,
        constraint: "Supervised".into(),
        monotone: false,
        supervised: true,
    }];
    for (block, monotone) in [(3, false), (10, true)] {
        for (k, (label, ..)) in COMBINATIONS.iter().enumerate() {
            cases.push(AblationCase {
                case: block + k as u32,
                constraint: (*label).into(),
                monotone,
                supervised: false,
            });
        }
    }
    cases
}

impl AblationCase {
    fn components(&self) -> Option<Components> {
        if self.supervised {
            return None;
        }
        let k = ((self.case - 3) % 7) as usize;
        let (_, bound, sensitivity, distribution) = COMBINATIONS[k];
        Some(Components {
            bound,
            sensitivity,
            distribution,
            mode: false,
        })
    }

    /// The base config restricted to this case's losses, or `None` when the
    /// base config lacks one of them.
    pub fn config(&self, base: &ConstraintConfig) -> Option<ConstraintConfig> {
        match self.components() {
            None => Some(base.clone()),
            Some(keep) => {
                let have = base.components();
                let available = (!keep.bound || have.bound)
                    && (!keep.sensitivity || have.sensitivity)
                    && (!keep.distribution || have.distribution);
                available.then(|| base.restricted(keep))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub case: AblationCase,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// Trains one case with `seed` and evaluates it on the held-out rows against
/// the labels of `raw` and the base config's bounds and target.
pub fn run_case(raw: &Dataset, base: &ConstraintConfig, case: &AblationCase, seed: u64) -> Result<AblationRow> {
    let Some(mut config) = case.config(base) else {
        return Ok(AblationRow {
            case: case.clone(),
            seed,
            metrics: None,
            skipped: Some("base config lacks a loss this case needs".into()),
        });
    };
    if case.supervised && raw.labels().is_none() {
        return Ok(AblationRow {
            case: case.clone(),
            seed,
            metrics: None,
            skipped: Some("no labels for the supervised baseline".into()),
        });
    }
    config.train.seed = seed;
    let outcome = run_training(
        raw,
        &config,
        &TrainOptions {
            monotone: case.monotone,
            supervised: case.supervised,
        },
    )?;
    let metrics = evaluate_rows(&outcome.model, raw, &outcome.test_rows, base)?;
    Ok(AblationRow {
        case: case.clone(),
        seed,
        metrics: Some(metrics),
        skipped: None,
    })
}

/// Scores the given rows of `raw` and evaluates them against `config`.
pub fn evaluate_rows(model: &ScoringModel, raw: &Dataset, rows: &[usize], config: &ConstraintConfig) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Metric("no rows to evaluate".into()));
    }
    let subset = raw.subset(rows);
    let scores = model.score_dataset(&subset)?;
    let features = subset.select(&config.feature_names())?;
    evaluate(&scores, &features, subset.labels(), config.bounds, &config.distribution)
}
