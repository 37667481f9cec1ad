//! Evaluation quantities: moment-matched Wasserstein-2 score, decoder singular
//! spectra, relative gradient distance curves, and the sinusoid alignment
//! diagnostic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff;
use crate::hutchinson::{self, NoiseKind};
use crate::linalg::{self, Matrix};
use crate::nets::NetworkPair;
use crate::surrogate::{self, exact_surrogate_grad, surrogate_logdet, EstimatorVariant, TraceSpace};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Surrogate(#[from] surrogate::SurrogateError),
    #[error(transparent)]
    Hutchinson(#[from] hutchinson::HutchinsonError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

const COV_JITTER: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianSummary {
    /// Empirical moments of sample rows, with the covariance jittered for the
    /// near-degenerate distributions model samples often produce.
    pub fn from_samples(samples: &Matrix) -> Result<GaussianSummary> {
        let (n, d) = (samples.rows, samples.cols);
        if n < d + 1 {
            return Err(MetricsError::TooFewSamples { need: d + 1, got: n });
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += samples[(i, j)] / n as f64;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                let da = samples[(i, a)] - mean[a];
                for b in 0..d {
                    cov[(a, b)] += da * (samples[(i, b)] - mean[b]) / (n as f64 - 1.0);
                }
            }
        }
        for j in 0..d {
            cov[(j, j)] += COV_JITTER;
        }
        Ok(GaussianSummary { mean, cov })
    }
}

/// √(‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_b^{1/2} Σ_a Σ_b^{1/2})^{1/2})).
pub fn w2_gaussian(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let d = a.mean.len();
    let jitter = |m: &Matrix| {
        let mut j = m.symmetric_part();
        for i in 0..d {
            j[(i, i)] += COV_JITTER;
        }
        j
    };
    let ca = jitter(&a.cov);
    let cb = jitter(&b.cov);
    let rb = linalg::sqrtm_psd(&cb)?;
    let inner = rb.matmul(&ca).matmul(&rb);
    let cross = linalg::sqrtm_psd(&inner)?;
    let mean_sq: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr = ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok((mean_sq + tr.max(0.0)).sqrt())
}

/// Wasserstein-2 between the moment-matched Gaussians of model samples and
/// test data, computed after standardizing both sets with the test data's
/// per-column statistics.
pub fn fid_like(model_samples: &Matrix, test_data: &Matrix) -> Result<f64> {
    if model_samples.cols != test_data.cols {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} vs {} columns",
            model_samples.cols, test_data.cols
        )));
    }
    if model_samples.rows == test_data.rows && model_samples.data == test_data.data {
        // identical sample sets are exactly distance zero; skip the matrix
        // square roots, which would only add floating-point noise
        GaussianSummary::from_samples(test_data)?;
        return Ok(0.0);
    }
    let reference = GaussianSummary::from_samples(test_data)?;
    let d = test_data.cols;
    let std: Vec<f64> = (0..d).map(|j| reference.cov[(j, j)].sqrt().max(1e-12)).collect();
    let standardize = |m: &Matrix| {
        let mut out = m.clone();
        for i in 0..m.rows {
            for j in 0..d {
                out[(i, j)] = (m[(i, j)] - reference.mean[j]) / std[j];
            }
        }
        out
    };
    let a = GaussianSummary::from_samples(&standardize(model_samples))?;
    let b = GaussianSummary::from_samples(&standardize(test_data))?;
    w2_gaussian(&a, &b)
}

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Decoder Jacobian singular values per latent sample, descending.
    pub singular_values: Vec<Vec<f64>>,
    /// Mean over samples of Σ log s_i — the per-sample entropy change between
    /// latent and data space.
    pub mean_log_sum: f64,
    /// Mean count of singular values ≥ 1.
    pub mean_count_ge_one: f64,
}

pub fn decoder_spectrum(np: &NetworkPair, z_batch: &Matrix) -> Result<SpectrumReport> {
    let mut singular_values = Vec::with_capacity(z_batch.rows);
    let mut log_sum = 0.0;
    let mut count = 0.0;
    for i in 0..z_batch.rows {
        let j = autodiff::full_jacobian(&np.decoder, &np.theta, z_batch.row(i))?;
        let (_, s, _) = linalg::svd(&j)?;
        log_sum += s.iter().map(|v| v.ln()).sum::<f64>();
        count += s.iter().filter(|&&v| v >= 1.0).count() as f64;
        singular_values.push(s);
    }
    let n = z_batch.rows.max(1) as f64;
    Ok(SpectrumReport {
        singular_values,
        mean_log_sum: log_sum / n,
        mean_count_ge_one: count / n,
    })
}

/// ‖∇̂(K) − ∇‖₂ / ‖∇‖₂ per probe count, with orthogonalized probes (scaled
/// Gaussian when K exceeds the probe space dimension) and the deterministic
/// basis-probe gradient as reference. Gradients are batch means over the
/// variant's target parameters.
pub fn rel_grad_distance(
    np: &NetworkPair,
    x_batch: &Matrix,
    variant: EstimatorVariant,
    k_values: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let probe_dim = match variant.trace_space {
        TraceSpace::Latent => np.latent_dim(),
        TraceSpace::Data => np.data_dim(),
    };
    let n = x_batch.rows;
    let mut exact_mean: Vec<f64> = Vec::new();
    for i in 0..n {
        let (_, g) = exact_surrogate_grad(np, x_batch.row(i), variant)?;
        if exact_mean.is_empty() {
            exact_mean = vec![0.0; g.len()];
        }
        for (acc, v) in exact_mean.iter_mut().zip(&g) {
            *acc += v / n as f64;
        }
    }
    let exact_norm = linalg::norm(&exact_mean).max(1e-300);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let kind = if k <= probe_dim {
            NoiseKind::OrthogonalizedGaussian
        } else {
            NoiseKind::ScaledGaussian
        };
        let mut est_mean = vec![0.0; exact_mean.len()];
        for i in 0..n {
            let noise = hutchinson::sample(kind, probe_dim, k, &mut rng)?;
            let term = surrogate_logdet(np, x_batch.row(i), &noise, variant)?;
            for (acc, v) in est_mean.iter_mut().zip(&term.grad) {
                *acc += v / n as f64;
            }
        }
        let dist: f64 = est_mean
            .iter()
            .zip(&exact_mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / exact_norm;
        curve.push((k, dist));
    }
    Ok(curve)
}

fn curve_point(t: f64) -> (f64, f64) {
    (t, (std::f64::consts::FRAC_PI_2 * t).sin())
}

fn curve_speed(t: f64) -> f64 {
    let c = std::f64::consts::FRAC_PI_2;
    (1.0 + (c * (c * t).cos()).powi(2)).sqrt()
}

/// Arc position (arc length from t = 0, numerically integrated) and signed
/// orthogonal offset of each 2-D point relative to the curve (t, sin(πt/2)).
pub fn sinusoid_coords(points: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.cols != 2 {
        return Err(MetricsError::DimensionMismatch(format!("{} columns", points.cols)));
    }
    let mut arc = Vec::with_capacity(points.rows);
    let mut offset = Vec::with_capacity(points.rows);
    for i in 0..points.rows {
        let p = points.row(i);
        // nearest curve parameter: coarse grid around the x coordinate, then
        // ternary refinement
        let dist2 = |t: f64| {
            let (cx, cy) = curve_point(t);
            (p[0] - cx).powi(2) + (p[1] - cy).powi(2)
        };
        let mut best_t = p[0];
        let mut best = dist2(best_t);
        let span = 2.0;
        let steps = 200;
        for s in 0..=steps {
            let t = p[0] - span + 2.0 * span * s as f64 / steps as f64;
            let d = dist2(t);
            if d < best {
                best = d;
                best_t = t;
            }
        }
        let (mut lo, mut hi) = (best_t - 2.0 * span / steps as f64, best_t + 2.0 * span / steps as f64);
        for _ in 0..80 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if dist2(m1) < dist2(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let t = 0.5 * (lo + hi);
        // arc length from 0 to t by the trapezoid rule
        let n_int = 200;
        let mut s = 0.0;
        let h = t / n_int as f64;
        for k in 0..n_int {
            let a = h * k as f64;
            let b = h * (k + 1) as f64;
            s += 0.5 * h * (curve_speed(a) + curve_speed(b));
        }
        arc.push(s);
        let (cx, cy) = curve_point(t);
        let c = std::f64::consts::FRAC_PI_2;
        let tangent = (1.0, c * (c * t).cos());
        let speed = curve_speed(t);
        let normal = (-tangent.1 / speed, tangent.0 / speed);
        offset.push((p[0] - cx) * normal.0 + (p[1] - cy) * normal.1);
    }
    Ok((arc, offset))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentScores {
    /// |Pearson corr(latent, arc position)|.
    pub corr_curve: f64,
    /// |Pearson corr(latent, signed orthogonal offset)|.
    pub corr_noise: f64,
}

/// Which coordinate the 1-D latent tracks on the noisy sinusoid: position
/// along the curve, or the displacement off it.
pub fn manifold_alignment(np: &NetworkPair, points: &Matrix) -> Result<AlignmentScores> {
    if np.latent_dim() != 1 || np.data_dim() != 2 {
        return Err(MetricsError::DimensionMismatch(
            "alignment diagnostic needs D=2, d=1".into(),
        ));
    }
    let (arc, offset) = sinusoid_coords(points)?;
    let z: Vec<f64> = (0..points.rows).map(|i| np.encode(points.row(i))[0]).collect();
    Ok(AlignmentScores {
        corr_curve: pearson(&z, &arc).abs(),
        corr_noise: pearson(&z, &offset).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Act;
    use crate::data;
    use crate::nets::{self, ArchSpec, BlockKind, Side};
    use rand::Rng;

    #[test]
    fn w2_identical_is_zero() {
        let s = GaussianSummary { mean: vec![0.3, -0.7], cov: Matrix::diag(&[2.0, 0.5]) };
        assert!(w2_gaussian(&s, &s).unwrap() < 1e-6);
    }

    #[test]
    fn w2_one_dimensional_closed_form() {
        let a = GaussianSummary { mean: vec![0.0], cov: Matrix::diag(&[1.0]) };
        let b = GaussianSummary { mean: vec![1.0], cov: Matrix::diag(&[4.0]) };
        let got = w2_gaussian(&a, &b).unwrap();
        assert!((got - 2f64.sqrt()).abs() < 1e-8, "{got}");
    }

    #[test]
    fn w2_commuting_diagonal_closed_form() {
        let la = [3.0, 1.0, 0.5];
        let lb = [2.0, 2.0, 0.1];
        let ma = [0.5, -0.5, 1.0];
        let mb = [0.0, 0.0, 0.0];
        let a = GaussianSummary { mean: ma.to_vec(), cov: Matrix::diag(&la) };
        let b = GaussianSummary { mean: mb.to_vec(), cov: Matrix::diag(&lb) };
        let mut expect = 0.0;
        for i in 0..3 {
            expect += (ma[i] - mb[i]).powi(2) + (la[i].sqrt() - lb[i].sqrt()).powi(2);
        }
        let got = w2_gaussian(&a, &b).unwrap();
        assert!((got - expect.sqrt()).abs() < 1e-7, "{got} vs {}", expect.sqrt());
    }

    #[test]
    fn w2_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Matrix::zeros(3, 3);
        for v in s.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let a = GaussianSummary {
            mean: vec![0.1, 0.2, 0.3],
            cov: s.transpose().matmul(&s).add(&Matrix::identity(3).scale(0.2)),
        };
        let b = GaussianSummary { mean: vec![-0.5, 0.0, 0.4], cov: Matrix::diag(&[1.0, 2.0, 0.3]) };
        let ab = w2_gaussian(&a, &b).unwrap();
        let ba = w2_gaussian(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-7);
        assert!(ab > 0.1);
    }

    #[test]
    fn fid_of_data_with_itself_is_zero() {
        let ds = data::gen_sinusoid(500, 0.1, 1).unwrap();
        assert_eq!(fid_like(&ds.x, &ds.x).unwrap(), 0.0);
    }

    #[test]
    fn fid_bootstrap_halves_shrink_with_n() {
        let halves = |n: usize| {
            let ds = data::gen_sinusoid(n, 0.1, 2).unwrap();
            let mut first = Matrix::zeros(n / 2, 2);
            let mut second = Matrix::zeros(n - n / 2, 2);
            first.data.copy_from_slice(&ds.x.data[..(n / 2) * 2]);
            second.data.copy_from_slice(&ds.x.data[(n / 2) * 2..]);
            fid_like(&first, &second).unwrap()
        };
        let small = halves(400);
        let large = halves(8000);
        assert!(small > 0.0);
        assert!(large < small, "large-n fid {large} not below {small}");
    }

    #[test]
    fn fid_invariant_to_common_column_affine_map() {
        let ds = data::gen_sinusoid(1000, 0.1, 3).unwrap();
        let model = data::gen_sinusoid(1000, 0.2, 4).unwrap();
        let base = fid_like(&model.x, &ds.x).unwrap();
        let map = |m: &Matrix| {
            let mut out = m.clone();
            for i in 0..m.rows {
                out[(i, 0)] = 3.0 * m[(i, 0)] - 5.0;
                out[(i, 1)] = 0.25 * m[(i, 1)] + 2.0;
            }
            out
        };
        let mapped = fid_like(&map(&model.x), &map(&ds.x)).unwrap();
        assert!((base - mapped).abs() < 1e-6, "{base} vs {mapped}");
    }

    #[test]
    fn spectrum_of_isometric_embedding_is_ones() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let np = nets::linear_pair(&a).unwrap();
        let z = Matrix::from_vec(2, 2, vec![0.1, 0.2, -0.5, 0.3]);
        let rep = decoder_spectrum(&np, &z).unwrap();
        for s in &rep.singular_values {
            for v in s {
                assert!((v - 1.0).abs() < 1e-10);
            }
        }
        assert!(rep.mean_log_sum.abs() < 1e-10);
        assert!((rep.mean_count_ge_one - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_scales_with_decoder() {
        let np = nets::build(&ArchSpec {
            data_dim: 3,
            latent_dim: 2,
            hidden: vec![],
            block: BlockKind::Mlp,
            activation: Act::Relu,
            seed: 5,
        })
        .unwrap();
        let z = Matrix::from_vec(1, 2, vec![0.4, -0.2]);
        let base = decoder_spectrum(&np, &z).unwrap();
        let mut scaled = np.clone();
        let theta2: Vec<f64> = np.theta.iter().map(|v| 2.0 * v).collect();
        scaled.set_params(Side::Decoder, &theta2).unwrap();
        let rep = decoder_spectrum(&scaled, &z).unwrap();
        for (a, b) in rep.singular_values[0].iter().zip(&base.singular_values[0]) {
            assert!((a - 2.0 * b).abs() < 1e-10);
        }
        assert!((rep.mean_log_sum - (base.mean_log_sum + 2.0 * 2f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn spectrum_matches_finite_difference_jacobian() {
        let np = nets::build(&ArchSpec {
            data_dim: 3,
            latent_dim: 2,
            hidden: vec![5],
            block: BlockKind::Mlp,
            activation: Act::Silu,
            seed: 6,
        })
        .unwrap();
        let z = [0.3, 0.6];
        let rep = decoder_spectrum(&np, &Matrix::from_vec(1, 2, z.to_vec())).unwrap();
        let h = 1e-6;
        let mut fd = Matrix::zeros(3, 2);
        for j in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let yp = np.decode(&zp);
            let ym = np.decode(&zm);
            for i in 0..3 {
                fd[(i, j)] = (yp[i] - ym[i]) / (2.0 * h);
            }
        }
        let (_, s_fd, _) = linalg::svd(&fd).unwrap();
        for (a, b) in rep.singular_values[0].iter().zip(&s_fd) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn rel_grad_distance_zero_at_full_latent_batch() {
        let np = nets::build(&ArchSpec {
            data_dim: 6,
            latent_dim: 3,
            hidden: vec![8],
            block: BlockKind::Mlp,
            activation: Act::Tanh,
            seed: 7,
        })
        .unwrap();
        let x = Matrix::from_vec(2, 6, vec![0.1, -0.3, 0.5, 0.2, -0.1, 0.4, 0.7, 0.0, -0.6, 0.3, 0.2, -0.2]);
        let curve =
            rel_grad_distance(&np, &x, EstimatorVariant::default(), &[1, 2, 3], 42).unwrap();
        let (k_last, dist_last) = *curve.last().unwrap();
        assert_eq!(k_last, 3);
        assert!(dist_last < 1e-8, "distance at K=d is {dist_last}");
        assert!(curve[0].1 > dist_last);
    }

    #[test]
    fn sinusoid_coords_recover_curve_geometry() {
        // points on the curve: offsets vanish, arc is monotone in t
        let ts = [-1.5, -0.7, 0.0, 0.4, 1.2];
        let mut pts = Matrix::zeros(ts.len(), 2);
        for (i, &t) in ts.iter().enumerate() {
            let (x, y) = curve_point(t);
            pts[(i, 0)] = x;
            pts[(i, 1)] = y;
        }
        let (arc, offset) = sinusoid_coords(&pts).unwrap();
        for o in &offset {
            assert!(o.abs() < 1e-6, "offset {o}");
        }
        for w in arc.windows(2) {
            assert!(w[1] > w[0]);
        }
        // arc length exceeds parameter distance (the curve is longer than its
        // x-projection)
        assert!(arc[4] - arc[0] > ts[4] - ts[0]);
    }

    #[test]
    fn alignment_extremes() {
        let ds = data::gen_sinusoid(400, 0.1, 8).unwrap();
        let (arc, offset) = sinusoid_coords(&ds.x).unwrap();
        // a latent equal to the arc coordinate: curve correlation saturates
        assert!(pearson(&arc, &arc).abs() > 0.999);
        assert!(pearson(&arc, &offset).abs() < 0.2);
        // the x-coordinate projector tracks the curve, not the noise
        let np = nets::linear_pair(&Matrix::from_vec(1, 2, vec![1.0, 0.0])).unwrap();
        let scores = manifold_alignment(&np, &ds.x).unwrap();
        assert!(scores.corr_curve > 0.95, "corr_curve {}", scores.corr_curve);
        assert!(scores.corr_noise < 0.5, "corr_noise {}", scores.corr_noise);
        assert!(scores.corr_curve > scores.corr_noise);
    }
}
