//! Min-max normalization to [0, 1] and the direction transforms that turn
//! negative and convex feature effects into monotone increasing inputs.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a raw feature is expected to influence the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Positive,
    Negative,
    /// Peak at the extremes, linear pieces: `x` then `1 - x`.
    ConvexLinear,
    /// Peak at the extremes, quadratic pieces: `x^2` then `(1 - x)^2`.
    ConvexQuadratic,
}

pub fn apply_direction(x: f64, direction: Direction) -> f64 {
    match direction {
        Direction::Positive => x,
        Direction::Negative => 1.0 - x,
        Direction::ConvexLinear => {
            if x <= 0.5 {
                x
            } else {
                1.0 - x
            }
        }
        Direction::ConvexQuadratic => {
            if x <= 0.5 {
                x * x
            } else {
                (1.0 - x) * (1.0 - x)
            }
        }
    }
}

/// Per-feature training-time minimum and maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    /// Maps `value` of feature `j` into [0, 1], clamping out-of-range values.
    pub fn normalize(&self, j: usize, value: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span <= 0.0 {
            return 0.0;
        }
        ((value - self.min[j]) / span).clamp(0.0, 1.0)
    }
}

/// Min-max normalizes every column, failing on constant columns.
pub fn fit_normalize(data: &Dataset) -> Result<(Dataset, NormalizationStats)> {
    let width = data.n_features();
    if data.n_rows() == 0 {
        return Err(Error::InvalidInput("cannot normalize an empty dataset".into()));
    }
    let mut min = vec![f64::INFINITY; width];
    let mut max = vec![f64::NEG_INFINITY; width];
    for i in 0..data.n_rows() {
        for (j, &v) in data.row(i).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    if let Some(j) = (0..width).find(|&j| max[j] <= min[j]) {
        return Err(Error::DegenerateFeature(data.feature_names()[j].clone()));
    }
    let stats = NormalizationStats { min, max };
    let values = (0..data.n_rows())
        .flat_map(|i| {
            let stats = &stats;
            data.row(i)
                .iter()
                .enumerate()
                .map(move |(j, &v)| stats.normalize(j, v))
        })
        .collect();
    let normalized = Dataset::new(
        data.feature_names().to_vec(),
        values,
        data.labels().map(<[f64]>::to_vec),
    )?;
    Ok((normalized, stats))
}

/// Everything needed to turn raw feature columns into network inputs.
/// Persisted inside the model file so scoring reuses training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePipeline {
    pub feature_names: Vec<String>,
    pub directions: Vec<Direction>,
    pub stats: NormalizationStats,
}

impl FeaturePipeline {
    /// Fits normalization on `data` (columns selected by name) and returns the
    /// pipeline with the transformed training matrix.
    pub fn fit(data: &Dataset, names: &[String], directions: &[Direction]) -> Result<(Self, Dataset)> {
        if names.len() != directions.len() {
            return Err(Error::InvalidConfig("one direction per feature required".into()));
        }
        let selected = data.select(names)?;
        let (_, stats) = fit_normalize(&selected)?;
        let pipeline = FeaturePipeline {
            feature_names: names.to_vec(),
            directions: directions.to_vec(),
            stats,
        };
        let transformed = pipeline.transform(&selected)?;
        Ok((pipeline, transformed))
    }

    /// Selects the pipeline's columns from `data`, normalizes with the stored
    /// statistics (clamped to [0, 1]) and applies the direction transforms.
    /// Labels are carried through unchanged.
    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        let selected = data.select(&self.feature_names)?;
        let mut values = Vec::with_capacity(selected.values().len());
        for i in 0..selected.n_rows() {
            for (j, &v) in selected.row(i).iter().enumerate() {
                values.push(apply_direction(self.stats.normalize(j, v), self.directions[j]));
            }
        }
        Dataset::new(
            self.feature_names.clone(),
            values,
            selected.labels().map(<[f64]>::to_vec),
        )
    }

    pub fn transform_tensor(&self, data: &Dataset) -> Result<Tensor> {
        self.transform(data)?.to_tensor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [Direction; 4] = [
        Direction::Positive,
        Direction::Negative,
        Direction::ConvexLinear,
        Direction::ConvexQuadratic,
    ];

    #[test]
    fn normalize_column() {
        let d = Dataset::from_rows(vec!["a".into()], &[vec![0.0], vec![5.0], vec![10.0]], None).unwrap();
        let (n, stats) = fit_normalize(&d).unwrap();
        assert_eq!(n.column(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(stats.normalize(0, 12.0), 1.0);
        assert_eq!(stats.normalize(0, -3.0), 0.0);
    }

    #[test]
    fn constant_column_is_named() {
        let d = Dataset::from_rows(
            vec!["ok".into(), "flat".into()],
            &[vec![1.0, 7.0], vec![2.0, 7.0], vec![3.0, 7.0]],
            None,
        )
        .unwrap();
        match fit_normalize(&d) {
            Err(Error::DegenerateFeature(name)) => assert_eq!(name, "flat"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn direction_examples() {
        assert!((apply_direction(0.3, Direction::Negative) - 0.7).abs() < 1e-15);
        assert_eq!(apply_direction(0.2, Direction::ConvexLinear), 0.2);
        assert!((apply_direction(0.8, Direction::ConvexLinear) - 0.2).abs() < 1e-15);
        assert_eq!(apply_direction(0.5, Direction::ConvexQuadratic), 0.25);
        // both branches agree at the breakpoint
        assert_eq!(0.5f64 * 0.5, (1.0f64 - 0.5) * (1.0 - 0.5));
        assert_eq!(apply_direction(0.5, Direction::ConvexLinear), 0.5);
    }

    #[test]
    fn negative_direction_reverses_order_through_pipeline() {
        let d = Dataset::from_rows(vec!["a".into()], &[vec![1.0], vec![3.0], vec![2.0]], None).unwrap();
        let (p, t) = FeaturePipeline::fit(&d, &["a".into()], &[Direction::Negative]).unwrap();
        assert_eq!(t.column(0), vec![1.0, 0.0, 0.5]);
        assert_eq!(p.stats.min, vec![1.0]);
    }

    proptest! {
        #[test]
        fn transforms_stay_in_unit_interval(x in 0.0f64..=1.0) {
            for dir in ALL {
                let y = apply_direction(x, dir);
                prop_assert!((0.0..=1.0).contains(&y));
            }
        }

        #[test]
        fn negative_is_involution(x in 0.0f64..=1.0) {
            let y = apply_direction(apply_direction(x, Direction::Negative), Direction::Negative);
            prop_assert!((y - x).abs() < 1e-15);
            prop_assert_eq!(apply_direction(x, Direction::Positive), x);
        }

        #[test]
        fn convex_transforms_symmetric(x in 0.0f64..=0.5) {
            for dir in [Direction::ConvexLinear, Direction::ConvexQuadratic] {
                let l = apply_direction(x, dir);
                let r = apply_direction(1.0 - x, dir);
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn convex_transforms_continuous(x in 0.0f64..1.0) {
            let h = 1e-9;
            for dir in [Direction::ConvexLinear, Direction::ConvexQuadratic] {
                let a = apply_direction(x, dir);
                let b = apply_direction((x + h).min(1.0), dir);
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
