//! Dense matrix/vector kernels: SVD, pseudoinverse, symmetric eigendecomposition,
//! PSD matrix square root, conjugate gradient and orthogonal probe sampling.
//!
//! Everything operates on small row-major `f64` matrices. Decompositions are
//! deterministic given their input.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("SVD failed to converge after {0} sweeps")]
    SvdNonConvergence(usize),
    #[error("matrix is not PSD: eigenvalue {0} below tolerance")]
    NotPsd(f64),
    #[error("conjugate gradient did not converge: residual {residual} after {iters} iterations")]
    CgFailure { residual: f64, iters: usize },
    #[error("rank-deficient matrix: smallest singular value {0}")]
    RankDeficient(f64),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.add(&other.scale(-1.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    /// (A + Aᵀ)/2
    pub fn symmetric_part(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        self.add(&self.transpose()).scale(0.5)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric eigendecomposition, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns, same order as `eigenvalues`.
    pub eigenvectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    assert_eq!(m.rows, m.cols, "sym_eig requires a square matrix");
    if !m.is_finite() {
        return Err(LinalgError::InvalidArgument("non-finite entries".into()));
    }
    let n = m.rows;
    let mut a = m.symmetric_part();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(1.0);
    let max_sweeps = 100;
    for sweep in 0..=max_sweeps {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            break;
        }
        if sweep == max_sweeps {
            return Err(LinalgError::SvdNonConvergence(max_sweeps));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vecs[(i, new_j)] = v[(i, old_j)];
        }
    }
    Ok(SymEig { eigenvalues, eigenvectors: vecs })
}

/// One-sided Jacobi SVD. Returns `(U, s, Vt)` with `s` descending and
/// `U diag(s) Vt` reconstructing the input. `U` is rows×k, `Vt` is k×cols
/// with `k = min(rows, cols)`.
pub fn svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if !m.is_finite() {
        return Err(LinalgError::InvalidArgument("non-finite entries".into()));
    }
    if m.rows < m.cols {
        let (u, s, vt) = svd(&m.transpose())?;
        return Ok((vt.transpose(), s, u.transpose()));
    }
    let rows = m.rows;
    let cols = m.cols;
    // Work on columns of A; V accumulates the right rotations.
    let mut a = m.clone();
    let mut v = Matrix::identity(cols);
    let scale = a.frobenius_norm().max(1e-300);
    let tol = 1e-15;
    let max_sweeps = 60;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    app += a[(i, p)] * a[(i, p)];
                    aqq += a[(i, q)] * a[(i, q)];
                    apq += a[(i, p)] * a[(i, q)];
                }
                if apq.abs() <= tol * (app.sqrt() * aqq.sqrt()).max(tol * scale * scale) {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..rows {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for i in 0..cols {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNonConvergence(max_sweeps));
    }
    let mut sv: Vec<(f64, usize)> = (0..cols)
        .map(|j| {
            let n: f64 = (0..rows).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
            (n, j)
        })
        .collect();
    sv.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let s: Vec<f64> = sv.iter().map(|&(n, _)| n).collect();
    let mut u = Matrix::zeros(rows, cols);
    let mut vt = Matrix::zeros(cols, cols);
    for (new_j, &(n, old_j)) in sv.iter().enumerate() {
        if n > 1e-300 {
            for i in 0..rows {
                u[(i, new_j)] = a[(i, old_j)] / n;
            }
        }
        for i in 0..cols {
            vt[(new_j, i)] = v[(i, old_j)];
        }
    }
    // Complete left-singular columns that collapsed to zero so U stays
    // orthonormal on rank-deficient inputs.
    for j in 0..cols {
        let nj: f64 = (0..rows).map(|i| u[(i, j)] * u[(i, j)]).sum::<f64>().sqrt();
        if nj > 0.5 {
            continue;
        }
        for basis in 0..rows {
            let mut cand: Vec<f64> = (0..rows).map(|i| if i == basis { 1.0 } else { 0.0 }).collect();
            for k in 0..cols {
                if k == j {
                    continue;
                }
                let proj: f64 = (0..rows).map(|i| cand[i] * u[(i, k)]).sum();
                for i in 0..rows {
                    cand[i] -= proj * u[(i, k)];
                }
            }
            let n = norm(&cand);
            if n > 1e-6 {
                for i in 0..rows {
                    u[(i, j)] = cand[i] / n;
                }
                break;
            }
        }
    }
    Ok((u, s, vt))
}

/// Moore–Penrose pseudoinverse via SVD. Singular values below
/// `rel_cutoff * s_max` are treated as zero.
pub fn pinv(m: &Matrix, rel_cutoff: f64) -> Result<Matrix> {
    let (u, s, vt) = svd(m)?;
    let s_max = s.first().copied().unwrap_or(0.0);
    let k = s.len();
    let mut out = Matrix::zeros(m.cols, m.rows);
    for j in 0..k {
        if s[j] <= rel_cutoff * s_max || s[j] == 0.0 {
            continue;
        }
        let inv = 1.0 / s[j];
        // out += v_j (u_j)^T / s_j
        for r in 0..m.cols {
            let vj = vt[(j, r)];
            if vj == 0.0 {
                continue;
            }
            for c in 0..m.rows {
                out[(r, c)] += vj * inv * u[(c, j)];
            }
        }
    }
    Ok(out)
}

pub const PINV_REL_CUTOFF: f64 = 1e-12;

/// Symmetric PSD square root. Eigenvalues in [-1e-10, 0) are clamped to zero;
/// anything more negative is an error.
pub fn sqrtm_psd(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &l in &eig.eigenvalues {
        if l < -1e-10 * scale.max(1.0) {
            return Err(LinalgError::NotPsd(l));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let v = &eig.eigenvectors;
    let n = m.rows;
    let mut out = Matrix::zeros(n, n);
    for k in 0..n {
        let r = roots[k];
        for i in 0..n {
            let vik = v[(i, k)] * r;
            for j in 0..n {
                out[(i, j)] += vik * v[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Conjugate gradient for SPD operators given only as a matvec closure.
pub fn cg_solve<F>(apply: F, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs_old = dot(&r, &r);
    for _ in 0..max_iter {
        if rs_old.sqrt() <= tol * b_norm {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(LinalgError::CgFailure { residual: rs_old.sqrt(), iters: 0 });
        }
        let alpha = rs_old / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
    }
    if rs_old.sqrt() <= tol * b_norm {
        Ok(x)
    } else {
        Err(LinalgError::CgFailure { residual: rs_old.sqrt() / b_norm, iters: max_iter })
    }
}

/// First `k` columns of a random d×d orthogonal matrix, each scaled by √d.
///
/// Sampled as the Q factor of a d×k standard-normal matrix via modified
/// Gram-Schmidt. The sign of R's diagonal is left uncorrected: a quadratic
/// form ε'Aε is invariant to flipping the sign of ε.
pub fn sample_orthogonal_columns<R: Rng>(d: usize, k: usize, rng: &mut R) -> Result<Matrix> {
    if k == 0 || k > d {
        return Err(LinalgError::InvalidArgument(format!(
            "need 1 <= K <= d, got K={k}, d={d}"
        )));
    }
    let sqrt_d = (d as f64).sqrt();
    loop {
        let mut cols: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut degenerate = false;
        for j in 0..k {
            for prev in 0..j {
                let proj = dot(&cols[j], &cols[prev]);
                for i in 0..d {
                    let p = cols[prev][i];
                    cols[j][i] -= proj * p;
                }
            }
            let n = norm(&cols[j]);
            if n < 1e-12 {
                degenerate = true;
                break;
            }
            for x in cols[j].iter_mut() {
                *x /= n;
            }
        }
        if degenerate {
            continue; // measure-zero event; resample
        }
        let mut q = Matrix::zeros(d, k);
        for j in 0..k {
            for i in 0..d {
                q[(i, j)] = cols[j][i] * sqrt_d;
            }
        }
        return Ok(q);
    }
}
