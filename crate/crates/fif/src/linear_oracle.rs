//! Closed-form solutions of the linear-Gaussian model: optimal subspace
//! selection, the exact loss and its gradient, and critical-point
//! certification. These are the ground truth that end-to-end training runs are
//! checked against.

use thiserror::Error;

use crate::linalg::{self, Matrix, PINV_REL_CUTOFF};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("covariance must be symmetric positive definite: eigenvalue {0:.3e}")]
    NotPd(f64),
    #[error("rank-deficient matrix: smallest singular value {0:.3e}")]
    RankDeficient(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Optimal d-dimensional subspace of the linear model under data covariance Σ
/// and reconstruction noise scale σ².
#[derive(Debug, Clone)]
pub struct LinearOracleSolution {
    /// Eigenvalues of Σ, descending.
    pub lambda: Vec<f64>,
    /// Matching eigenvectors as columns.
    pub v: Matrix,
    /// Binary selection over eigendirections, exactly d ones.
    pub alpha: Vec<bool>,
    /// Σ ½ α_i (log λ_i − λ_i/σ²), the selection-dependent part of the loss.
    pub loss_alpha: f64,
    /// The d selected eigenvector columns.
    pub selected_subspace: Matrix,
}

/// Numerical certificate for a candidate critical point A.
#[derive(Debug, Clone)]
pub struct CriticalPointCert {
    /// U = A Σ^{1/2}; at a critical point its rows are orthonormal.
    pub u: Matrix,
    /// ‖∂L/∂A‖_F.
    pub grad_residual: f64,
    /// ‖UUᵀ − I‖_F.
    pub orthonormality_err: f64,
    /// ‖UᵀU Σ − Σ UᵀU‖_F.
    pub commute_err: f64,
}

fn selection_score(lambda: f64, sigma2: f64) -> f64 {
    lambda.ln() - lambda / sigma2
}

/// Choose the d eigendirections minimizing the closed-form loss: the d
/// smallest values of f(λ) = log λ − λ/σ², ties broken toward larger λ so the
/// high-noise and low-noise regimes both reduce to deterministic PCA variants.
pub fn optimal_selection(sigma: &Matrix, sigma2: f64, d: usize) -> Result<LinearOracleSolution> {
    if sigma.rows != sigma.cols {
        return Err(OracleError::InvalidArgument(format!(
            "covariance must be square, got {}×{}",
            sigma.rows, sigma.cols
        )));
    }
    let big_d = sigma.rows;
    if d == 0 || d > big_d {
        return Err(OracleError::InvalidArgument(format!("need 1 ≤ d ≤ {big_d}, got {d}")));
    }
    if sigma2 <= 0.0 {
        return Err(OracleError::InvalidArgument("σ² must be positive".into()));
    }
    let eig = linalg::sym_eig(sigma)?;
    let min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        return Err(OracleError::NotPd(min));
    }
    let mut order: Vec<usize> = (0..big_d).collect();
    // ascending f; ties toward larger λ, i.e. toward the front of the
    // descending eigenvalue list
    order.sort_by(|&a, &b| {
        let fa = selection_score(eig.eigenvalues[a], sigma2);
        let fb = selection_score(eig.eigenvalues[b], sigma2);
        fa.partial_cmp(&fb).unwrap().then(a.cmp(&b))
    });
    let mut alpha = vec![false; big_d];
    for &i in order.iter().take(d) {
        alpha[i] = true;
    }
    let loss_alpha: f64 = (0..big_d)
        .filter(|&i| alpha[i])
        .map(|i| 0.5 * selection_score(eig.eigenvalues[i], sigma2))
        .sum();
    let mut selected = Matrix::zeros(big_d, d);
    let mut col = 0;
    for i in 0..big_d {
        if alpha[i] {
            for r in 0..big_d {
                selected[(r, col)] = eig.eigenvectors[(r, i)];
            }
            col += 1;
        }
    }
    Ok(LinearOracleSolution {
        lambda: eig.eigenvalues,
        v: eig.eigenvectors,
        alpha,
        loss_alpha,
        selected_subspace: selected,
    })
}

/// The critical encoder for a selection: A = Λ_sel^{−1/2} V_selᵀ, satisfying
/// AΣAᵀ = I.
pub fn critical_encoder(solution: &LinearOracleSolution) -> Matrix {
    let d = solution.selected_subspace.cols;
    let big_d = solution.selected_subspace.rows;
    let mut a = Matrix::zeros(d, big_d);
    let selected_lambda: Vec<f64> = solution
        .alpha
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| solution.lambda[i])
        .collect();
    for k in 0..d {
        let scale = selected_lambda[k].sqrt().recip();
        for j in 0..big_d {
            a[(k, j)] = scale * solution.selected_subspace[(j, k)];
        }
    }
    a
}

fn check_full_rank(a: &Matrix) -> Result<()> {
    let (_, s, _) = linalg::svd(a)?;
    let smin = s.last().copied().unwrap_or(0.0);
    if smin <= PINV_REL_CUTOFF * s.first().copied().unwrap_or(0.0).max(1.0) {
        return Err(OracleError::RankDeficient(smin));
    }
    Ok(())
}

/// L(A) = ½ tr(AΣAᵀ) − ½ log det(AAᵀ) + (1/2σ²) tr(Σ(I − A†A)).
pub fn closed_form_loss(a: &Matrix, sigma: &Matrix, sigma2: f64) -> Result<f64> {
    check_full_rank(a)?;
    let at = a.transpose();
    let asat = a.matmul(sigma).matmul(&at);
    let aat = a.matmul(&at);
    let eig = linalg::sym_eig(&aat)?;
    let logdet: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
    let a_pinv = linalg::pinv(a, PINV_REL_CUTOFF)?;
    let proj = a_pinv.matmul(a); // A†A, D×D
    let mut residual_proj = Matrix::identity(a.cols).sub(&proj);
    residual_proj = sigma.matmul(&residual_proj);
    Ok(0.5 * asat.trace() - 0.5 * logdet + residual_proj.trace() / (2.0 * sigma2))
}

/// ∂L/∂A = (ΣAᵀ − A† − (1/σ²)(I − A†A)ΣA†)ᵀ.
pub fn loss_gradient(a: &Matrix, sigma: &Matrix, sigma2: f64) -> Result<Matrix> {
    check_full_rank(a)?;
    let at = a.transpose();
    let a_pinv = linalg::pinv(a, PINV_REL_CUTOFF)?; // D×d
    let proj = a_pinv.matmul(a);
    let anti = Matrix::identity(a.cols).sub(&proj);
    let term3 = anti.matmul(sigma).matmul(&a_pinv).scale(1.0 / sigma2);
    Ok(sigma.matmul(&at).sub(&a_pinv).sub(&term3).transpose())
}

pub fn verify_critical_point(a: &Matrix, sigma: &Matrix, sigma2: f64) -> Result<CriticalPointCert> {
    let grad = loss_gradient(a, sigma, sigma2)?;
    let sqrt_sigma = linalg::sqrtm_psd(sigma)?;
    let u = a.matmul(&sqrt_sigma);
    let uut = u.matmul(&u.transpose());
    let orthonormality_err = uut.sub(&Matrix::identity(a.rows)).frobenius_norm();
    let utu = u.transpose().matmul(&u);
    let commute_err = utu.matmul(sigma).sub(&sigma.matmul(&utu)).frobenius_norm();
    Ok(CriticalPointCert {
        u,
        grad_residual: grad.frobenius_norm(),
        orthonormality_err,
        commute_err,
    })
}

fn orthonormal_columns(m: &Matrix) -> Result<Matrix> {
    let mut q = m.clone();
    for j in 0..q.cols {
        for prev in 0..j {
            let mut proj = 0.0;
            for r in 0..q.rows {
                proj += q[(r, j)] * q[(r, prev)];
            }
            for r in 0..q.rows {
                q[(r, j)] -= proj * q[(r, prev)];
            }
        }
        let mut norm = 0.0;
        for r in 0..q.rows {
            norm += q[(r, j)] * q[(r, j)];
        }
        let norm = norm.sqrt();
        if norm < 1e-12 {
            return Err(OracleError::RankDeficient(norm));
        }
        for r in 0..q.rows {
            q[(r, j)] /= norm;
        }
    }
    Ok(q)
}

/// Principal angles between the column spans of S1 and S2, ascending, in
/// [0, π/2].
pub fn principal_angles(s1: &Matrix, s2: &Matrix) -> Result<Vec<f64>> {
    if s1.rows != s2.rows {
        return Err(OracleError::InvalidArgument(format!(
            "ambient dims differ: {} vs {}",
            s1.rows, s2.rows
        )));
    }
    let q1 = orthonormal_columns(s1)?;
    let q2 = orthonormal_columns(s2)?;
    let (_, s, _) = linalg::svd(&q1.transpose().matmul(&q2))?;
    Ok(s.iter().map(|&v| v.clamp(-1.0, 1.0).acos()).collect())
}
