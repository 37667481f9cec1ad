//! Synthetic dataset generators and tabular CSV ingestion with
//! train-split-only standardization.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("covariance undefined for {0} sample(s)")]
    CovarianceUndefined(usize),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// Contiguous fraction-based split covering all n rows.
    pub fn fractions(n: usize, train: f64, val: f64) -> Result<Split> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
            return Err(DataError::InvalidSplit(format!(
                "fractions train={train}, val={val} out of range"
            )));
        }
        let n_train = (n as f64 * train).round() as usize;
        let n_val = (n as f64 * val).round() as usize;
        if n_train + n_val > n {
            return Err(DataError::InvalidSplit("split exceeds row count".into()));
        }
        Ok(Split { train: 0..n_train, val: n_train..n_train + n_val, test: n_train + n_val..n })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let ok = self.train.end == self.val.start
            && self.val.end == self.test.start
            && self.train.start == 0
            && self.test.end == n;
        if !ok {
            return Err(DataError::InvalidSplit(format!(
                "ranges must be disjoint and cover 0..{n}: {:?} {:?} {:?}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    pub params: serde_json::Value,
    /// Constant columns removed during standardization (original indices).
    pub dropped_columns: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub split: Split,
    pub standardization: Option<Standardization>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.x.cols
    }

    fn rows_matrix(&self, range: &Range<usize>) -> Matrix {
        let mut m = Matrix::zeros(range.len(), self.x.cols);
        for (out, i) in range.clone().enumerate() {
            m.data[out * self.x.cols..(out + 1) * self.x.cols]
                .copy_from_slice(self.x.row(i));
        }
        m
    }

    pub fn train(&self) -> Matrix {
        self.rows_matrix(&self.split.train)
    }

    pub fn val(&self) -> Matrix {
        self.rows_matrix(&self.split.val)
    }

    pub fn test(&self) -> Matrix {
        self.rows_matrix(&self.split.test)
    }

    /// Sidecar description written next to run outputs.
    pub fn meta_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.meta.name,
            "seed": self.meta.seed,
            "params": self.meta.params,
            "rows": self.x.rows,
            "cols": self.x.cols,
            "split": {
                "train": [self.split.train.start, self.split.train.end],
                "val": [self.split.val.start, self.split.val.end],
                "test": [self.split.test.start, self.split.test.end],
            },
            "standardization": self.standardization,
            "dropped_columns": self.meta.dropped_columns,
        })
    }

    pub fn sample_covariance(&self, rows: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let n = rows.rows;
        if n < 2 {
            return Err(DataError::CovarianceUndefined(n));
        }
        let d = rows.cols;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += rows[(i, j)] / n as f64;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                let da = rows[(i, a)] - mean[a];
                for b in 0..d {
                    cov[(a, b)] += da * (rows[(i, b)] - mean[b]) / (n as f64 - 1.0);
                }
            }
        }
        Ok((mean, cov))
    }
}

const DEFAULT_TRAIN_FRAC: f64 = 0.8;
const DEFAULT_VAL_FRAC: f64 = 0.1;

/// x ~ N(0,1), y = sin(πx/2), plus 2-D isotropic Gaussian noise.
pub fn gen_sinusoid(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DataError::InvalidArgument("need n ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, 2);
    // curve points first, noise in a second pass, so the same seed yields the
    // same underlying curve at every noise level
    for i in 0..n {
        let t: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = t;
        x[(i, 1)] = (std::f64::consts::FRAC_PI_2 * t).sin();
    }
    if noise_std > 0.0 {
        for v in x.data.iter_mut() {
            *v += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Dataset {
        split: Split::fractions(n, DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC)?,
        x,
        standardization: None,
        meta: DatasetMeta {
            name: "sinusoid".into(),
            seed,
            params: serde_json::json!({ "n": n, "noise_std": noise_std }),
            dropped_columns: vec![],
        },
    })
}

/// Zero-mean Gaussian samples with the requested covariance (via its PSD
/// square root).
pub fn gen_gaussian(n: usize, sigma: &Matrix, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DataError::InvalidArgument("need n ≥ 1".into()));
    }
    if sigma.rows != sigma.cols {
        return Err(DataError::InvalidArgument("covariance must be square".into()));
    }
    let root = linalg::sqrtm_psd(sigma)?;
    let d = sigma.rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let row = root.matvec(&u);
        x.data[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    Ok(Dataset {
        split: Split::fractions(n, DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC)?,
        x,
        standardization: None,
        meta: DatasetMeta {
            name: "gaussian".into(),
            seed,
            params: serde_json::json!({ "n": n, "dim": d }),
            dropped_columns: vec![],
        },
    })
}

/// Equal-weight isotropic Gaussian mixture; component for each sample is drawn
/// uniformly.
pub fn gen_gmm(n: usize, means: &[Vec<f64>], std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || means.is_empty() {
        return Err(DataError::InvalidArgument("need n ≥ 1 and ≥ 1 component".into()));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d) {
        return Err(DataError::InvalidArgument("component means must share a nonzero dim".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let c = rng.gen_range(0..means.len());
        for j in 0..d {
            x[(i, j)] = means[c][j] + std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Dataset {
        split: Split::fractions(n, DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC)?,
        x,
        standardization: None,
        meta: DatasetMeta {
            name: "gmm".into(),
            seed,
            params: serde_json::json!({ "n": n, "components": means.len(), "std": std }),
            dropped_columns: vec![],
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SplitSpec {
    Fractions { train: f64, val: f64 },
    Ranges { train: Range<usize>, val: Range<usize>, test: Range<usize> },
}

/// Rectangular numeric CSV (no header detection: a non-numeric first row is
/// treated as a header and skipped). Standardization statistics come from the
/// train split only; constant train columns are dropped. Dequantization noise
/// is off by default and exists only for parity experiments.
pub fn load_csv(
    path: &Path,
    split_spec: &SplitSpec,
    standardize: bool,
    dequant_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut cols = None;
    for (ri, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Parse { row: ri, col: 0, msg: e.to_string() })?;
        let mut row = Vec::with_capacity(record.len());
        let mut numeric = true;
        for (ci, field) in record.iter().enumerate() {
            match field.trim().parse::<f64>() {
                Ok(v) => row.push(v),
                Err(e) => {
                    if ri == 0 {
                        numeric = false;
                        break;
                    }
                    return Err(DataError::Parse { row: ri, col: ci, msg: e.to_string() });
                }
            }
        }
        if !numeric {
            continue; // header row
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(DataError::Parse {
                    row: ri,
                    col: row.len(),
                    msg: format!("ragged row: expected {c} fields, got {}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = cols.ok_or_else(|| DataError::InvalidArgument("empty csv".into()))?;
    let mut x = Matrix::zeros(n, d);
    for (i, row) in rows.iter().enumerate() {
        x.data[i * d..(i + 1) * d].copy_from_slice(row);
    }
    if dequant_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in x.data.iter_mut() {
            *v += dequant_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let split = match split_spec {
        SplitSpec::Fractions { train, val } => Split::fractions(n, *train, *val)?,
        SplitSpec::Ranges { train, val, test } => {
            let s = Split { train: train.clone(), val: val.clone(), test: test.clone() };
            s.validate(n)?;
            s
        }
    };
    let mut dropped = Vec::new();
    let mut standardization = None;
    if standardize {
        let tn = split.train.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for i in split.train.clone() {
            for j in 0..d {
                mean[j] += x[(i, j)] / tn;
            }
        }
        let mut std = vec![0.0; d];
        for i in split.train.clone() {
            for j in 0..d {
                let dv = x[(i, j)] - mean[j];
                std[j] += dv * dv / tn;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
        }
        let keep: Vec<usize> = (0..d).filter(|&j| std[j] > 1e-12).collect();
        dropped = (0..d).filter(|j| !keep.contains(j)).collect();
        if !dropped.is_empty() {
            eprintln!("warning: dropping constant column(s) {dropped:?}");
        }
        let mut xs = Matrix::zeros(n, keep.len());
        for i in 0..n {
            for (jj, &j) in keep.iter().enumerate() {
                xs[(i, jj)] = (x[(i, j)] - mean[j]) / std[j];
            }
        }
        standardization = Some(Standardization {
            mean: keep.iter().map(|&j| mean[j]).collect(),
            std: keep.iter().map(|&j| std[j]).collect(),
        });
        x = xs;
    }
    Ok(Dataset {
        x,
        split,
        standardization,
        meta: DatasetMeta {
            name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            seed,
            params: serde_json::json!({
                "path": path.to_string_lossy(),
                "standardize": standardize,
                "dequant_noise": dequant_noise,
            }),
            dropped_columns: dropped,
        },
    })
}
