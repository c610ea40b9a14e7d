//! Datasets: CSV ingestion, the synthetic benchmark generator and seeded splits.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named numeric feature columns, stored row-major, with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    values: Vec<f64>,
    labels: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, values: Vec<f64>, labels: Option<Vec<f64>>) -> Result<Self> {
        let width = feature_names.len();
        if width == 0 {
            return Err(Error::InvalidInput("dataset needs at least one feature".into()));
        }
        if values.len() % width != 0 {
            return Err(Error::InvalidInput(format!(
                "{} values do not fill rows of width {width}",
                values.len()
            )));
        }
        let n_rows = values.len() / width;
        if let Some(labels) = &labels {
            if labels.len() != n_rows {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {n_rows} rows",
                    labels.len()
                )));
            }
        }
        Ok(Dataset {
            feature_names,
            values,
            labels,
        })
    }

    pub fn from_rows(feature_names: Vec<String>, rows: &[Vec<f64>], labels: Option<Vec<f64>>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != feature_names.len()) {
            return Err(Error::InvalidInput("row width differs from feature count".into()));
        }
        Dataset::new(feature_names, rows.concat(), labels)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_features();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn with_labels(mut self, labels: Option<Vec<f64>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.n_rows() {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {} rows",
                    l.len(),
                    self.n_rows()
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Reorders/filters columns by name. Fails naming every missing column.
    pub fn select(&self, names: &[String]) -> Result<Dataset> {
        let missing: Vec<&str> = names
            .iter()
            .filter(|n| self.column_index(n).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "data is missing feature column(s): {}",
                missing.join(", ")
            )));
        }
        let idx: Vec<usize> = names.iter().filter_map(|n| self.column_index(n)).collect();
        let mut values = Vec::with_capacity(self.n_rows() * idx.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Dataset::new(names.to_vec(), values, self.labels.clone())
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.n_features());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset {
            feature_names: self.feature_names.clone(),
            values,
            labels,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.n_rows(), self.n_features(), self.values.clone())
    }

    /// Writes features (and the label column, if any, named `label_name`).
    pub fn write_csv(&self, path: &Path, label_name: &str) -> Result<()> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::new();
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        if self.labels.is_some() {
            header.push(label_name);
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.n_rows() {
            let mut cells: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                cells.push(l[i].to_string());
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Parameters of the four-feature synthetic benchmark
/// `y = x1 + a1*x2 + a2*x3 + x4^2` with Gaussian features.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub a1: f64,
    pub a2: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 10_000,
            mean: 10.0,
            variance: 3.0,
            a1: 5.0,
            a2: 15.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(seed: u64) -> Self {
        SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn label(&self, x: &[f64]) -> f64 {
        x[0] + self.a1 * x[1] + self.a2 * x[2] + x[3] * x[3]
    }
}

pub const SYNTHETIC_FEATURES: [&str; 4] = ["x1", "x2", "x3", "x4"];

pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::InvalidConfig("synthetic n must be at least 1".into()));
    }
    if !(spec.variance > 0.0) || !spec.mean.is_finite() {
        return Err(Error::InvalidConfig("synthetic variance must be positive".into()));
    }
    let normal = Normal::new(spec.mean, spec.variance.sqrt())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.n * 4);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: [f64; 4] = std::array::from_fn(|_| normal.sample(&mut rng));
        labels.push(spec.label(&x));
        values.extend_from_slice(&x);
    }
    Dataset::new(
        SYNTHETIC_FEATURES.iter().map(|s| s.to_string()).collect(),
        values,
        Some(labels),
    )
}

/// Reads a headered, comma-separated numeric file. When `label_column` is
/// given, that column becomes the label and is removed from the features.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column)
}

pub fn read_csv<R: std::io::Read>(reader: R, label_column: Option<&str>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Format("missing header row".into()));
    }
    if header.iter().all(|h| h.parse::<f64>().is_ok()) {
        return Err(Error::Format(
            "first row is numeric; a header row with column names is required".into(),
        ));
    }
    let label_idx = match label_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("label column '{name}' not found in header"))
        })?),
        None => None,
    };
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::Format("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // data rows are 1-based, counting after the header
        let row = i + 1;
        if record.len() != header.len() {
            return Err(Error::Format(format!(
                "row {row} has {} cells, header has {}",
                record.len(),
                header.len()
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: header[j].clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: header[j].clone(),
                    message: format!("'{cell}' is not a finite number"),
                });
            }
            if Some(j) == label_idx {
                labels.as_mut().expect("label vec exists").push(v);
            } else {
                values.push(v);
            }
        }
    }
    Dataset::new(feature_names, values, labels)
}

/// Seeded shuffle, then the first `floor(fraction * n)` rows train.
/// Returns the two datasets together with the row indices used for each.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (train_fraction * n as f64).floor() as usize;
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(data.n_rows(), train_fraction, seed)?;
    Ok((data.subset(&train), data.subset(&test)))
}
