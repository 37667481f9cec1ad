//! Probe-noise generation and stochastic trace estimation, with the closed-form
//! variance predictors used to validate each noise family.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sample_orthogonal_columns, Matrix};

#[derive(Debug, Error)]
pub enum HutchinsonError {
    #[error("invalid probe count: {0}")]
    InvalidProbeCount(String),
    #[error("dimension mismatch: probes are {probe_dim}-dimensional, operator is {op_dim}")]
    DimensionMismatch { probe_dim: usize, op_dim: usize },
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, HutchinsonError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Rademacher,
    Gaussian,
    /// Standard normal rescaled to norm √d exactly.
    ScaledGaussian,
    /// First K columns of a random orthogonal matrix, scaled by √d; recovers
    /// the trace exactly at K = d.
    OrthogonalizedGaussian,
}

/// Probe batch: rows of `eps` are the K probe vectors ε_k, each satisfying the
/// E[εεᵀ] = I contract of its kind.
#[derive(Debug, Clone)]
pub struct NoiseBatch {
    pub eps: Matrix,
    pub kind: NoiseKind,
}

impl NoiseBatch {
    pub fn k(&self) -> usize {
        self.eps.rows
    }

    pub fn dim(&self) -> usize {
        self.eps.cols
    }

    pub fn probe(&self, k: usize) -> &[f64] {
        self.eps.row(k)
    }
}

/// Default noise family: lowest-variance single probe, orthogonalized batch
/// otherwise.
pub fn default_kind(k: usize) -> NoiseKind {
    if k <= 1 {
        NoiseKind::ScaledGaussian
    } else {
        NoiseKind::OrthogonalizedGaussian
    }
}

pub fn sample<R: Rng>(kind: NoiseKind, d: usize, k: usize, rng: &mut R) -> Result<NoiseBatch> {
    if k == 0 || d == 0 {
        return Err(HutchinsonError::InvalidProbeCount("need K ≥ 1 and d ≥ 1".into()));
    }
    let eps = match kind {
        NoiseKind::Rademacher => {
            let mut m = Matrix::zeros(k, d);
            for v in m.data.iter_mut() {
                *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
            m
        }
        NoiseKind::Gaussian => {
            let mut m = Matrix::zeros(k, d);
            for v in m.data.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            m
        }
        NoiseKind::ScaledGaussian => {
            let mut m = Matrix::zeros(k, d);
            let target = (d as f64).sqrt();
            for i in 0..k {
                loop {
                    let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let n = crate::linalg::norm(&row);
                    if n > 1e-100 {
                        for (j, v) in row.iter().enumerate() {
                            m[(i, j)] = v * target / n;
                        }
                        break;
                    }
                }
            }
            m
        }
        NoiseKind::OrthogonalizedGaussian => {
            if k > d {
                return Err(HutchinsonError::InvalidProbeCount(format!(
                    "orthogonalized probes require K ≤ d, got K={k}, d={d}"
                )));
            }
            // columns of the sampled orthogonal frame become probe rows
            sample_orthogonal_columns(d, k, rng)?.transpose()
        }
    };
    Ok(NoiseBatch { eps, kind })
}

/// (1/K) Σ_k ε_kᵀ (A ε_k) for a matrix-free operator.
pub fn trace_estimate<F>(apply: F, noise: &NoiseBatch) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k = noise.k();
    let mut acc = 0.0;
    for i in 0..k {
        let eps = noise.probe(i);
        let a_eps = apply(eps);
        acc += crate::linalg::dot(eps, &a_eps);
    }
    acc / k as f64
}

pub fn trace_estimate_matrix(a: &Matrix, noise: &NoiseBatch) -> Result<f64> {
    if a.cols != noise.dim() {
        return Err(HutchinsonError::DimensionMismatch { probe_dim: noise.dim(), op_dim: a.cols });
    }
    Ok(trace_estimate(|v| a.matvec(v), noise))
}

/// Population eigenvalue variance σ²(λ) of a symmetric matrix, computed as
/// ‖A‖_F²/d − (tr A/d)² — no eigendecomposition needed.
fn eigenvalue_variance(a_sym: &Matrix) -> f64 {
    let d = a_sym.rows as f64;
    let mean_sq = a_sym.frobenius_norm().powi(2) / d;
    let mean = a_sym.trace() / d;
    (mean_sq - mean * mean).max(0.0)
}

/// Variance of the K-probe trace estimate of A. All formulas act on the
/// symmetric part A_s = (A + Aᵀ)/2; the antisymmetric part contributes nothing
/// to either the estimate or its variance.
pub fn analytic_variance(kind: NoiseKind, k: usize, a: &Matrix) -> Result<f64> {
    if a.rows != a.cols {
        return Err(HutchinsonError::DimensionMismatch { probe_dim: a.rows, op_dim: a.cols });
    }
    if k == 0 {
        return Err(HutchinsonError::InvalidProbeCount("need K ≥ 1".into()));
    }
    let d = a.rows;
    let a_s = a.symmetric_part();
    let df = d as f64;
    let kf = k as f64;
    Ok(match kind {
        NoiseKind::Rademacher => {
            let mut off = 0.0;
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        off += a_s[(i, j)] * a_s[(i, j)];
                    }
                }
            }
            2.0 * off / kf
        }
        NoiseKind::Gaussian => 2.0 * a_s.frobenius_norm().powi(2) / kf,
        NoiseKind::ScaledGaussian => {
            2.0 * df * df / (df + 2.0) * eigenvalue_variance(&a_s) / kf
        }
        NoiseKind::OrthogonalizedGaussian => {
            if k > d {
                return Err(HutchinsonError::InvalidProbeCount(format!(
                    "orthogonalized probes require K ≤ d, got K={k}, d={d}"
                )));
            }
            if d == 1 {
                // single probe in one dimension recovers the trace exactly
                0.0
            } else {
                2.0 * df * df * (df - kf) / (kf * (df - 1.0) * (df + 2.0))
                    * eigenvalue_variance(&a_s)
            }
        }
    })
}
