//! Score quality metrics and kernel density curves.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{kl_exponential_value, kl_gaussian_value, TargetDistribution, SIGMA_FLOOR};

/// Fractional ranks starting at 1; ties share the average of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Metric("spearman needs at least 2 values".into()));
    }
    pearson(&ranks(a), &ranks(b)).ok_or_else(|| Error::Metric("spearman of a constant series".into()))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Metric("rmse of an empty series".into()));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Mean and population standard deviation.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Divergence of a moment-matched Gaussian fit of `scores` from `target`.
pub fn kl_to_target(scores: &[f64], target: &TargetDistribution) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Metric("kl_to_target needs at least 2 scores".into()));
    }
    let (mu, sigma) = moments(scores);
    if !(sigma >= SIGMA_FLOOR) {
        return Err(Error::Metric("scores have no spread".into()));
    }
    let value = match *target {
        TargetDistribution::None => return Err(Error::Metric("no target distribution configured".into())),
        TargetDistribution::Gaussian { mu: m2, sigma: s2 } => kl_gaussian_value(mu, sigma, m2, s2),
        TargetDistribution::Exponential { lambda } => kl_exponential_value(mu, sigma, lambda),
    };
    value.map_err(|e| Error::Metric(e.to_string()))
}

/// Percentage of scores in `[a, b]`, endpoints included.
pub fn bounds_coverage(scores: &[f64], a: f64, b: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Metric("coverage of an empty series".into()));
    }
    if !(b > a) {
        return Err(Error::Metric(format!("invalid bounds [{a}, {b}]")));
    }
    let inside = scores.iter().filter(|&&s| a <= s && s <= b).count();
    Ok(100.0 * inside as f64 / scores.len() as f64)
}

/// Spearman of each feature column against the scores. Constant columns are
/// left out of the map.
pub fn feature_correlations(data: &Dataset, scores: &[f64]) -> Result<BTreeMap<String, f64>> {
    if scores.len() != data.n_rows() {
        return Err(Error::Metric(format!(
            "{} scores for {} rows",
            scores.len(),
            data.n_rows()
        )));
    }
    let mut out = BTreeMap::new();
    for (j, name) in data.feature_names().iter().enumerate() {
        match spearman(&data.column(j), scores) {
            Ok(rho) => {
                out.insert(name.clone(), rho);
            }
            Err(Error::Metric(_)) => log::debug!("feature '{name}' is constant; correlation omitted"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Trapezoidal integral of the density.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["grid", "density"])?;
        for (x, d) in self.grid.iter().zip(&self.density) {
            w.write_record([x.to_string(), d.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<kde output>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Silverman's rule of thumb, `1.06 * sd * n^(-1/5)` with the sample sd.
pub fn silverman_bandwidth(scores: &[f64]) -> f64 {
    let n = scores.len() as f64;
    let (mean, _) = moments(scores);
    let var = scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Gaussian kernel density estimate on a uniform grid over
/// `[min - 3h, max + 3h]`.
pub fn kde(scores: &[f64], bandwidth: Option<f64>, grid_points: usize) -> Result<KdeCurve> {
    if scores.len() < 2 {
        return Err(Error::Metric("kde needs at least 2 scores".into()));
    }
    if grid_points < 2 {
        return Err(Error::Metric("kde needs at least 2 grid points".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Metric(format!("bandwidth must be > 0, got {h}"))),
        None => silverman_bandwidth(scores),
    };
    if !(h > 0.0) {
        return Err(Error::Metric("scores have no spread".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let norm = 1.0 / (scores.len() as f64 * h * (2.0 * PI).sqrt());
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&x| {
            norm * scores
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
    })
}

pub const DEFAULT_GRID_POINTS: usize = 256;

/// Metrics of one scoring run. Label-dependent fields are absent without
/// ground truth; `kl_to_target` is absent without a target distribution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_to_target: Option<f64>,
    pub min_score: f64,
    pub max_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pct_within_bounds: Option<f64>,
    pub feature_correlations: BTreeMap<String, f64>,
}

/// Evaluates `scores` for the rows of `features` (raw, untransformed).
pub fn evaluate(
    scores: &[f64],
    features: &Dataset,
    truth: Option<&[f64]>,
    bounds: Option<[f64; 2]>,
    target: &TargetDistribution,
) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Metric("no scores".into()));
    }
    if scores.len() != features.n_rows() {
        return Err(Error::Metric(format!(
            "{} scores for {} rows",
            scores.len(),
            features.n_rows()
        )));
    }
    let (rank_correlation, rmse_value) = match truth {
        Some(t) => (Some(spearman(scores, t)?), Some(rmse(scores, t)?)),
        None => (None, None),
    };
    let kl = match target {
        TargetDistribution::None => None,
        t => Some(kl_to_target(scores, t)?),
    };
    Ok(MetricsReport {
        rank_correlation,
        rmse: rmse_value,
        kl_to_target: kl,
        min_score: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max_score: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pct_within_bounds: bounds.map(|[a, b]| bounds_coverage(scores, a, b)).transpose()?,
        feature_correlations: feature_correlations(features, scores)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn spearman_examples() {
        close(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0, 1e-15);
        close(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, 1e-15);
        close(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, 1e-15);
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::Metric(_))));
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Metric(_))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn rmse_examples() {
        close(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0, 0.0);
        close(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt(), 1e-15);
        close(rmse(&[1.0], &[4.0]).unwrap(), 3.0, 0.0);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kl_to_target_examples() {
        // population moments (0, 1)
        let s = [-1.0, 1.0];
        close(
            kl_to_target(&s, &TargetDistribution::Gaussian { mu: 1.0, sigma: 1.0 }).unwrap(),
            0.5,
            1e-15,
        );
        let s = [2.0, 4.0, 9.0, 1.0];
        let (mu, sigma) = moments(&s);
        close(kl_to_target(&s, &TargetDistribution::Gaussian { mu, sigma }).unwrap(), 0.0, 1e-10);
        assert!(matches!(kl_to_target(&s, &TargetDistribution::None), Err(Error::Metric(_))));
        assert!(kl_to_target(&[3.0, 3.0], &TargetDistribution::Gaussian { mu: 0.0, sigma: 1.0 }).is_err());
    }

    #[test]
    fn coverage_examples() {
        close(bounds_coverage(&[1.0, 2.0], 0.0, 10.0).unwrap(), 100.0, 0.0);
        close(bounds_coverage(&[-1.0, 5.0, 11.0], 0.0, 10.0).unwrap(), 100.0 / 3.0, 1e-12);
        close(bounds_coverage(&[10.0], 0.0, 10.0).unwrap(), 100.0, 0.0);
        assert!(bounds_coverage(&[], 0.0, 1.0).is_err());
    }

    #[test]
    fn feature_correlation_self_and_constant() {
        let d = Dataset::from_rows(
            vec!["a".into(), "flat".into()],
            &[vec![1.0, 2.0], vec![4.0, 2.0], vec![2.0, 2.0]],
            None,
        )
        .unwrap();
        let c = feature_correlations(&d, &[1.0, 4.0, 2.0]).unwrap();
        close(c["a"], 1.0, 1e-15);
        assert!(!c.contains_key("flat"));
    }

    #[test]
    fn kde_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let s: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let curve = kde(&s, None, DEFAULT_GRID_POINTS).unwrap();
        let peak = curve.density.iter().copied().fold(0.0, f64::max);
        let expected = 1.0 / (2.0 * PI).sqrt();
        assert!((peak - expected).abs() / expected < 0.15, "peak {peak}");
        assert!((0.97..=1.03).contains(&curve.integral()));
        assert!(curve.grid.windows(2).all(|w| w[0] < w[1]));
        assert!(curve.density.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn kde_symmetric_sample() {
        let s = [-3.0, -1.0, 0.0, 1.0, 3.0];
        let curve = kde(&s, None, 257).unwrap();
        let n = curve.density.len();
        for i in 0..n / 2 {
            close(curve.density[i], curve.density[n - 1 - i], 1e-12);
        }
        assert!(kde(&[1.0], None, 256).is_err());
        assert!(kde(&[2.0, 2.0], None, 256).is_err());
        close(kde(&s, Some(0.5), 256).unwrap().bandwidth, 0.5, 0.0);
    }

    #[test]
    fn kde_csv_has_header() {
        let curve = kde(&[0.0, 1.0, 2.0], None, 4).unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("grid,density\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn report_without_truth_lacks_label_fields() {
        let d = Dataset::from_rows(vec!["a".into()], &[vec![1.0], vec![2.0], vec![3.0]], None).unwrap();
        let r = evaluate(&[1.0, 2.0, 3.0], &d, None, Some([0.0, 10.0]), &TargetDistribution::None).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("rank_correlation").is_none());
        assert!(json.get("rmse").is_none());
        assert_eq!(r.pct_within_bounds, Some(100.0));
        let r = evaluate(&[1.0, 2.0, 3.0], &d, Some(&[1.0, 2.0, 3.0]), None, &TargetDistribution::None).unwrap();
        assert_eq!(r.rank_correlation, Some(1.0));
        assert_eq!(r.rmse, Some(0.0));
    }

    fn brute_force(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let d2: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    #[test]
    fn matches_brute_force_on_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(2..=50);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let b: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
            let ident: Vec<usize> = (0..n).collect();
            close(spearman(&a, &b).unwrap(), brute_force(&ident, &perm), 1e-12);
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transforms(v in proptest::collection::vec(-100.0f64..100.0, 3..40)) {
            let w: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * 0.5 + (i as f64).sin()).collect();
            prop_assume!(spearman(&v, &w).is_ok());
            let rho = spearman(&v, &w).unwrap();
            let inc: Vec<f64> = v.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let dec: Vec<f64> = v.iter().map(|x| -x.exp().min(1e300)).collect();
            prop_assert!((spearman(&inc, &w).unwrap() - rho).abs() < 1e-12);
            prop_assert!((spearman(&dec, &w).unwrap() + rho).abs() < 1e-12);
        }

        #[test]
        fn coverage_complement(v in proptest::collection::vec(-20.0f64..20.0, 1..50)) {
            let inside = bounds_coverage(&v, -5.0, 5.0).unwrap();
            let outside = 100.0 * v.iter().filter(|&&s| !(-5.0..=5.0).contains(&s)).count() as f64 / v.len() as f64;
            prop_assert!((inside + outside - 100.0).abs() < 1e-9);
        }

        #[test]
        fn kde_integrates_to_one(v in proptest::collection::vec(-50.0f64..50.0, 2..60)) {
            let curve = kde(&v, None, DEFAULT_GRID_POINTS);
            prop_assume!(curve.is_ok());
            let i = curve.unwrap().integral();
            prop_assert!((0.97..=1.03).contains(&i), "integral {}", i);
        }
    }
}
