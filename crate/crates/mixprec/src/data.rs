//! Synthetic datasets, CSV ingestion and the train/eval split.

use std::path::{Path, PathBuf};

use mixprec_core::engine::{Dataset, EngineError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::DatasetSpec;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}, line {line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: no column named `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Train and eval parts of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub eval: Dataset,
}

/// `n` points in `classes` Gaussian clusters (unit variance) whose centers are
/// uniform in `[-spread, spread]^dim`. Labels cycle through the classes.
pub fn blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if classes == 0 || dim == 0 {
        return Err(DataError::Invalid("blobs need at least one class and one feature".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-spread..=spread)).collect())
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        features.extend(centers[c].iter().map(|&m| m + unit.sample(&mut rng)));
        labels.push(c);
    }
    Ok(Dataset::new(features, labels, dim)?)
}

/// Two interleaving half circles with Gaussian noise; two features, two classes.
pub fn moons(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    let jitter = Normal::new(0.0, noise).map_err(|e| DataError::Invalid(format!("noise {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0.0..=std::f64::consts::PI);
        let (x, y) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        features.push(x + jitter.sample(&mut rng));
        features.push(y + jitter.sample(&mut rng));
        labels.push(i % 2);
    }
    Ok(Dataset::new(features, labels, 2)?)
}

/// Reads a headered CSV of numbers. `label_column` is a header name, or a
/// zero-based index when no header matches. Labels must be non-negative
/// integers.
pub fn read_csv(path: &Path, label_column: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .or_else(|| label_column.parse::<usize>().ok().filter(|&i| i < headers.len()))
        .ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: label_column.to_string(),
        })?;
    let num_features = headers.len() - 1;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| DataError::Row {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_idx {
                let label = field
                    .parse::<usize>()
                    .map_err(|_| row_err(format!("label `{field}` is not a non-negative integer")))?;
                labels.push(label);
            } else {
                let v = field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| row_err(format!("`{field}` in column {} is not a finite number", j + 1)))?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Invalid(format!("{}: no rows", path.display())));
    }
    Ok(Dataset::new(features, labels, num_features)?)
}

/// Seeded shuffle, then the first 80% for training and the rest for eval
/// (at least one example each).
pub fn split_80_20(data: &Dataset, seed: u64) -> Result<SplitData, DataError> {
    let n = data.len();
    if n < 2 {
        return Err(DataError::Invalid(format!("{n} examples cannot be split")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval_len = (n / 5).max(1);
    let (train, eval) = order.split_at(n - eval_len);
    Ok(SplitData {
        train: data.subset(train),
        eval: data.subset(eval),
    })
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<SplitData, DataError> {
    let (data, seed) = match spec {
        DatasetSpec::Blobs {
            n,
            dim,
            classes,
            spread,
            seed,
        } => (blobs(*n, *dim, *classes, *spread, *seed)?, *seed),
        DatasetSpec::Moons { n, noise, seed } => (moons(*n, *noise, *seed)?, *seed),
        DatasetSpec::Csv {
            path,
            label_column,
            seed,
        } => (read_csv(path, label_column)?, *seed),
    };
    split_80_20(&data, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded() {
        let a = blobs(200, 2, 2, 3.0, 7).unwrap();
        let b = blobs(200, 2, 2, 3.0, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, blobs(200, 2, 2, 3.0, 8).unwrap());
        assert_eq!(a.len(), 200);
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 100);
    }

    #[test]
    fn moons_split_sizes() {
        let d = moons(100, 0.1, 1).unwrap();
        let s = split_80_20(&d, 1).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (80, 20));
        assert_eq!(s, split_80_20(&d, 1).unwrap());
    }
}
