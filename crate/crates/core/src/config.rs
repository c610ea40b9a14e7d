//! Constraint documents: which features matter and in what order, where the
//! scores should lie, and what shape their distribution should take.
//!
//! Documents are parsed strictly; unknown keys are rejected and every
//! validation failure names the JSON path that caused it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Direction;
use crate::losses::{LossWeights, SensitivityTiers, TargetDistribution};
use crate::train::TrainConfig;

/// One input column. A lower `tier` means a more important feature; features
/// without a tier rank below every tiered one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<u32>,
}

impl FeatureSpec {
    pub fn new(name: &str, direction: Direction, tier: Option<u32>) -> Self {
        FeatureSpec {
            name: name.to_string(),
            direction,
            tier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub features: Vec<FeatureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    /// Use the squared hinge for the bound loss.
    #[serde(default)]
    pub squared_bounds: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<f64>,
    #[serde(default)]
    pub distribution: TargetDistribution,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub rescale_after_training: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Which constraint families to keep when deriving a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub bound: bool,
    pub sensitivity: bool,
    pub distribution: bool,
    pub mode: bool,
}

impl ConstraintConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ConstraintConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::validation(json_path(&path), e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ConstraintConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.features.iter().map(|f| f.direction).collect()
    }

    /// Tier groups as feature indices, most important first. `None` when no
    /// feature carries a tier.
    pub fn tiers(&self) -> Result<Option<SensitivityTiers>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, f) in self.features.iter().enumerate() {
            if let Some(t) = f.tier {
                groups.entry(t).or_default().push(i);
            }
        }
        if groups.is_empty() {
            return Ok(None);
        }
        SensitivityTiers::new(groups.into_values().collect(), self.features.len()).map(Some)
    }

    pub fn has_tiers(&self) -> bool {
        self.features.iter().any(|f| f.tier.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::validation("$.features", "at least one feature is required"));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.name.trim().is_empty() {
                return Err(Error::validation(format!("$.features[{i}].name"), "feature name is empty"));
            }
            if let Some(j) = self.features[..i].iter().position(|g| g.name == f.name) {
                return Err(Error::validation(
                    format!("$.features[{i}].name"),
                    format!("duplicate feature '{}' (also at index {j})", f.name),
                ));
            }
        }
        if let Some([a, b]) = self.bounds {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::validation("$.bounds", "bounds must be finite"));
            }
            if b <= a {
                return Err(Error::validation("$.bounds", format!("upper bound {b} must exceed lower bound {a}")));
            }
        }
        if let Some(m) = self.mode {
            if !m.is_finite() {
                return Err(Error::validation("$.mode", "mode must be finite"));
            }
            if let Some([a, b]) = self.bounds {
                if m < a || m > b {
                    return Err(Error::validation("$.mode", format!("mode outside bounds: {m} not in [{a}, {b}]")));
                }
            }
        }
        self.distribution.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        if self.bounds.is_none() && self.mode.is_none() && self.distribution.is_none() && !self.has_tiers() {
            return Err(Error::validation(
                "$",
                "no loss enabled: set bounds, mode, distribution or a feature tier",
            ));
        }
        if let (Some([a, b]), TargetDistribution::Gaussian { mu, .. }) = (self.bounds, self.distribution) {
            if mu < a || mu > b {
                log::warn!("target mean {mu} lies outside bounds [{a}, {b}]");
            }
        }
        Ok(())
    }

    /// Which families are present.
    pub fn components(&self) -> Components {
        Components {
            bound: self.bounds.is_some(),
            sensitivity: self.has_tiers(),
            distribution: !self.distribution.is_none(),
            mode: self.mode.is_some(),
        }
    }

    /// A copy with the unselected constraint families removed.
    pub fn restricted(&self, keep: Components) -> ConstraintConfig {
        let mut c = self.clone();
        if !keep.bound {
            c.bounds = None;
        }
        if !keep.sensitivity {
            for f in &mut c.features {
                f.tier = None;
            }
        }
        if !keep.distribution {
            c.distribution = TargetDistribution::None;
        }
        if !keep.mode {
            c.mode = None;
        }
        c
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn json_path(serde_path: &str) -> String {
    if serde_path == "." || serde_path.is_empty() {
        "$".to_string()
    } else {
        format!("$.{serde_path}")
    }
}

pub const PRESETS: [&str; 5] = ["synthetic", "cwur", "journal", "ad", "imdb"];

/// Built-in constraint sets for the bundled dataset layouts.
pub fn preset(name: &str) -> Result<ConstraintConfig> {
    use Direction::{Negative, Positive};
    let f = FeatureSpec::new;
    let base = |features, bounds, mode, distribution, squared_bounds| ConstraintConfig {
        features,
        bounds: Some(bounds),
        squared_bounds,
        mode,
        distribution,
        weights: LossWeights::default(),
        rescale_after_training: false,
        train: TrainConfig::default(),
    };
    let config = match name {
        // ground-truth moments of y = x1 + 5 x2 + 15 x3 + x4^2 with x ~ N(10, 3):
        // mean 10 + 50 + 150 + 103 = 313, variance 3 + 75 + 675 + 1218 = 1971
        "synthetic" => base(
            vec![
                f("x1", Positive, None),
                f("x2", Positive, Some(2)),
                f("x3", Positive, Some(1)),
                f("x4", Positive, Some(0)),
            ],
            [19.62, 654.45],
            None,
            TargetDistribution::Gaussian {
                mu: 313.0,
                sigma: 1971f64.sqrt(),
            },
            false,
        ),
        "cwur" => base(
            vec![
                f("national_rank", Positive, Some(3)),
                f("quality_of_faculty", Positive, Some(2)),
                f("publications", Positive, Some(0)),
                f("influence", Positive, Some(1)),
                f("citations", Positive, Some(1)),
                f("patents", Positive, Some(0)),
                f("broad_impact", Positive, Some(2)),
            ],
            [40.0, 100.0],
            Some(45.0),
            TargetDistribution::None,
            true,
        ),
        "journal" => base(
            vec![
                f("pct_cited", Positive, Some(2)),
                f("snip", Positive, Some(1)),
                f("sjr", Positive, Some(0)),
            ],
            [5.0, 150.0],
            Some(13.0),
            TargetDistribution::None,
            true,
        ),
        "ad" => base(
            vec![
                f("impressions", Positive, Some(2)),
                f("clicks", Positive, Some(2)),
                f("amount_spent", Negative, None),
                f("leads", Positive, Some(2)),
                f("cost_per_click", Negative, None),
                f("cost_per_lead", Negative, Some(1)),
                f("lead_generation_rate", Positive, Some(0)),
            ],
            [0.0, 10.0],
            None,
            TargetDistribution::Gaussian { mu: 5.0, sigma: 1.0 },
            false,
        ),
        "imdb" => base(
            vec![
                f("gross_income", Positive, Some(0)),
                f("budget", Negative, None),
                f("num_voted_users", Positive, None),
                f("num_critic_reviews", Positive, None),
                f("num_user_reviews", Positive, None),
                f("duration", Positive, None),
            ],
            [0.0, 10.0],
            None,
            TargetDistribution::Gaussian { mu: 5.0, sigma: 1.0 },
            false,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    let mut config = config;
    if name == "synthetic" {
        // the all-losses objective keeps shifting sensitivity onto the top
        // tier; this budget stops where the lower tiers still contribute
        config.train.epochs = SYNTHETIC_EPOCHS;
    }
    config.validate()?;
    Ok(config)
}

/// Training budget of the synthetic preset.
pub const SYNTHETIC_EPOCHS: usize = 40;
