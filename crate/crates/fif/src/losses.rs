//! Training objectives: the injective-flow loss with its single-pass
//! log-determinant surrogate, the naive maximum-likelihood loss (kept for the
//! curvature-pathology demonstration), and the conjugate-gradient baseline.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, bilinear_jacobian_full, Tape};
use crate::hutchinson::{self, NoiseKind};
use crate::linalg::{self, Matrix, PINV_REL_CUTOFF};
use crate::nets::NetworkPair;
use crate::surrogate::{
    self, cg_logdet_grad, exact_logdet, surrogate_logdet, EstimatorVariant, GradTarget,
    TraceSpace,
};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {term} term: {value}")]
    NonFinite { term: &'static str, value: f64 },
    #[error(transparent)]
    Surrogate(#[from] surrogate::SurrogateError),
    #[error(transparent)]
    Hutchinson(#[from] hutchinson::HutchinsonError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPrior {
    StandardNormal,
}

impl LatentPrior {
    /// −log p_Z(z), additive constant included so values compare across d.
    pub fn nll(&self, z: &[f64]) -> f64 {
        match self {
            LatentPrior::StandardNormal => {
                let d = z.len() as f64;
                0.5 * z.iter().map(|v| v * v).sum::<f64>()
                    + 0.5 * d * (2.0 * std::f64::consts::PI).ln()
            }
        }
    }

    pub fn sample<R: Rng>(&self, d: usize, rng: &mut R) -> Vec<f64> {
        match self {
            LatentPrior::StandardNormal => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Reconstruction weight β.
    pub beta: f64,
    /// Probe count K.
    pub k: usize,
    pub variant: EstimatorVariant,
    pub prior: LatentPrior,
    /// Isotropic Gaussian augmentation added to inputs before encoding,
    /// resampled on every evaluation.
    pub noise_std: f64,
    /// Probe family; None selects scaled-Gaussian at K=1 and orthogonalized
    /// otherwise.
    pub noise_kind: Option<NoiseKind>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1.0,
            k: 1,
            variant: EstimatorVariant::default(),
            prior: LatentPrior::StandardNormal,
            noise_std: 0.0,
            noise_kind: None,
        }
    }
}

impl LossConfig {
    fn kind(&self) -> NoiseKind {
        self.noise_kind.unwrap_or_else(|| hutchinson::default_kind(self.k))
    }
}

/// Batch-mean parameter gradients for both networks.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

impl BatchGrads {
    fn zeros(np: &NetworkPair) -> Self {
        BatchGrads {
            phi: vec![0.0; np.encoder.param_len],
            theta: vec![0.0; np.decoder.param_len],
        }
    }

    fn scale(&mut self, c: f64) {
        for v in self.phi.iter_mut().chain(self.theta.iter_mut()) {
            *v *= c;
        }
    }
}

/// Batch-mean loss terms. `surrogate` is the unsigned log-determinant term
/// (probe average, or the exact value for the naive loss); `total` applies the
/// variant's sign.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossBreakdown {
    pub nll_prior: f64,
    pub surrogate: f64,
    pub recon: f64,
    pub total: f64,
}

fn check_finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LossError::NonFinite { term, value })
    }
}

fn augment<R: Rng>(x: &[f64], noise_std: f64, rng: &mut R) -> Vec<f64> {
    if noise_std == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|&v| v + noise_std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Prior-NLL + β·reconstruction terms and their gradients through the full
/// x → z → x̂ computation, shared by all three objectives.
fn nll_recon_terms(
    np: &NetworkPair,
    x_aug: &[f64],
    beta: f64,
    grads: &mut BatchGrads,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut tape: Tape<f64> = Tape::new(vec![np.encoder.param_len, np.decoder.param_len]);
    let xn = tape.input(x_aug.to_vec());
    let zn = tape.network(&np.encoder, &np.phi, 0, xn)?;
    let yn = tape.network(&np.decoder, &np.theta, 1, zn)?;
    let rn = tape.sub(yn, xn);
    let rsq = tape.dot(rn, rn);
    let zsq = tape.dot(zn, zn);
    let half_zsq = tape.scale(zsq, 0.5);
    let beta_rsq = tape.scale(rsq, beta);
    let loss_node = tape.add(half_zsq, beta_rsq);
    let z = tape.value(zn).to_vec();
    let recon = tape.value(rsq)[0];
    let res = tape.backward(loss_node, &[1.0])?;
    for (acc, g) in grads.phi.iter_mut().zip(&res.param_grads[0]) {
        *acc += g;
    }
    for (acc, g) in grads.theta.iter_mut().zip(&res.param_grads[1]) {
        *acc += g;
    }
    let d = np.latent_dim() as f64;
    let nll = 0.5 * z.iter().map(|v| v * v).sum::<f64>()
        + 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    Ok((nll, recon, z))
}

/// The production objective: −log p_Z(z) + sign·probe-surrogate + β‖x̂ − x‖²,
/// averaged over the batch with fresh probes (and augmentation noise) per
/// sample.
pub fn fif_loss<R: Rng>(
    np: &NetworkPair,
    x_batch: &Matrix,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(BatchGrads, LossBreakdown)> {
    if x_batch.rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut grads = BatchGrads::zeros(np);
    let mut bd = LossBreakdown::default();
    let probe_dim = match cfg.variant.trace_space {
        TraceSpace::Latent => np.latent_dim(),
        TraceSpace::Data => np.data_dim(),
    };
    for i in 0..x_batch.rows {
        let x_aug = augment(x_batch.row(i), cfg.noise_std, rng);
        let (nll, recon, _) = nll_recon_terms(np, &x_aug, cfg.beta, &mut grads)?;
        let noise = hutchinson::sample(cfg.kind(), probe_dim, cfg.k, rng)?;
        let term = surrogate_logdet(np, &x_aug, &noise, cfg.variant)?;
        match term.target {
            GradTarget::Encoder => {
                for (acc, g) in grads.phi.iter_mut().zip(&term.grad) {
                    *acc += g;
                }
            }
            GradTarget::Decoder => {
                for (acc, g) in grads.theta.iter_mut().zip(&term.grad) {
                    *acc += g;
                }
            }
        }
        bd.nll_prior += check_finite("prior NLL", nll)?;
        bd.surrogate += check_finite("surrogate", term.value)?;
        bd.recon += check_finite("reconstruction", recon)?;
        bd.total += nll + term.loss_value() + cfg.beta * recon;
    }
    let inv = 1.0 / x_batch.rows as f64;
    grads.scale(inv);
    bd.nll_prior *= inv;
    bd.surrogate *= inv;
    bd.recon *= inv;
    bd.total *= inv;
    Ok((grads, bd))
}

/// The naive maximum-likelihood objective −log p_Z(z) + ½ log det(g′ᵀg′) at
/// z = f(x), computed exactly: the decoder gradient from the pseudoinverse
/// oracle and the encoder gradient chained through z. Exists to demonstrate
/// the curvature pathology; β·recon is included so the pathology can be dosed.
pub fn naive_nll_loss<R: Rng>(
    np: &NetworkPair,
    x_batch: &Matrix,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(BatchGrads, LossBreakdown)> {
    if x_batch.rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut grads = BatchGrads::zeros(np);
    let mut bd = LossBreakdown::default();
    let d = np.latent_dim();
    for i in 0..x_batch.rows {
        let x_aug = augment(x_batch.row(i), cfg.noise_std, rng);
        let (nll, recon, z) = nll_recon_terms(np, &x_aug, cfg.beta, &mut grads)?;
        let ld = exact_logdet(np, &z)?;
        // θ: ∂/∂θ ½ log det = Σ_k row_k(J†)ᵀ ∂(J e_k)/∂θ, and the same probes'
        // point adjoints give ∇_z ½ log det for the encoder chain rule
        let j = autodiff::full_jacobian(&np.decoder, &np.theta, &z)?;
        let j_pinv = linalg::pinv(&j, PINV_REL_CUTOFF)?;
        let mut dz = vec![0.0; d];
        for k in 0..d {
            let mut e_k = vec![0.0; d];
            e_k[k] = 1.0;
            let cot = j_pinv.row(k).to_vec();
            let full = bilinear_jacobian_full(&np.decoder, &np.theta, &z, &e_k, &cot)?;
            for (acc, g) in grads.theta.iter_mut().zip(&full.param_grad) {
                *acc += g;
            }
            for (acc, g) in dz.iter_mut().zip(&full.point_grad) {
                *acc += g;
            }
        }
        let (_, mut tape) = autodiff::eval(&np.encoder, &np.phi, &x_aug)?;
        let chain = autodiff::vjp(&mut tape, &dz)?;
        for (acc, g) in grads.phi.iter_mut().zip(&chain.param_grad) {
            *acc += g;
        }
        bd.nll_prior += check_finite("prior NLL", nll)?;
        bd.surrogate += check_finite("log-determinant", ld)?;
        bd.recon += check_finite("reconstruction", recon)?;
        bd.total += nll + ld + cfg.beta * recon;
    }
    let inv = 1.0 / x_batch.rows as f64;
    grads.scale(inv);
    bd.nll_prior *= inv;
    bd.surrogate *= inv;
    bd.recon *= inv;
    bd.total *= inv;
    Ok((grads, bd))
}

/// Conjugate-gradient baseline: the same three-term objective with the
/// log-determinant gradient taken through the CG-solved probe surrogate
/// (decoder target).
pub fn rf_loss<R: Rng>(
    np: &NetworkPair,
    x_batch: &Matrix,
    cfg: &LossConfig,
    cg_tol: f64,
    cg_max_iter: usize,
    rng: &mut R,
) -> Result<(BatchGrads, LossBreakdown)> {
    if x_batch.rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut grads = BatchGrads::zeros(np);
    let mut bd = LossBreakdown::default();
    let d = np.latent_dim();
    for i in 0..x_batch.rows {
        let x_aug = augment(x_batch.row(i), cfg.noise_std, rng);
        let (nll, recon, _) = nll_recon_terms(np, &x_aug, cfg.beta, &mut grads)?;
        let noise = hutchinson::sample(cfg.kind(), d, cfg.k, rng)?;
        let term = cg_logdet_grad(np, &x_aug, &noise, cg_tol, cg_max_iter)?;
        for (acc, g) in grads.theta.iter_mut().zip(&term.grad) {
            *acc += g;
        }
        bd.nll_prior += check_finite("prior NLL", nll)?;
        bd.surrogate += check_finite("surrogate", term.value)?;
        bd.recon += check_finite("reconstruction", recon)?;
        bd.total += nll + term.value + cfg.beta * recon;
    }
    let inv = 1.0 / x_batch.rows as f64;
    grads.scale(inv);
    bd.nll_prior *= inv;
    bd.surrogate *= inv;
    bd.recon *= inv;
    bd.total *= inv;
    Ok((grads, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, Act, FD_STEP};
    use crate::nets::{self, ArchSpec, BlockKind};
    use crate::surrogate::JacobianSite;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row_matrix(rows: Vec<Vec<f64>>) -> Matrix {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        Matrix::from_rows(&refs)
    }

    #[test]
    fn hand_evaluated_linear_case() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let np = nets::linear_pair(&a).unwrap();
        let cfg = LossConfig {
            beta: 3.7,
            noise_kind: Some(NoiseKind::Rademacher),
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = row_matrix(vec![vec![1.0, 0.0]]);
        let (_, bd) = fif_loss(&np, &batch, &cfg, &mut rng).unwrap();
        let expect_nll = 0.5 + 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((bd.nll_prior - expect_nll).abs() < 1e-12);
        assert!((bd.surrogate - 1.0).abs() < 1e-12);
        assert!(bd.recon.abs() < 1e-20);
        assert!((bd.total - (expect_nll - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn on_manifold_point_has_zero_recon() {
        let a = Matrix::from_vec(1, 2, vec![0.8, 0.6]);
        let np = nets::linear_pair(&a).unwrap();
        let x = np.decode(&[1.3]);
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, bd) = fif_loss(&np, &row_matrix(vec![x]), &cfg, &mut rng).unwrap();
        assert!(bd.recon < 1e-20);
    }

    #[test]
    fn decoder_variant_gradient_matches_exact_loss_finite_differences() {
        // With K=d orthogonalized probes the surrogate gradient is
        // deterministic, so the whole loss gradient must match finite
        // differences of the exact objective on a linear pair.
        let a = Matrix::from_vec(2, 3, vec![1.1, 0.2, -0.3, 0.0, 0.9, 0.4]);
        let np = nets::linear_pair(&a).unwrap();
        let x = vec![0.5, -0.7, 0.2];
        let cfg = LossConfig {
            beta: 2.5,
            k: 2,
            variant: EstimatorVariant {
                grad_target: GradTarget::Decoder,
                trace_space: TraceSpace::Latent,
                jacobian_site: JacobianSite::OffManifold,
            },
            ..LossConfig::default()
        };
        let batch = row_matrix(vec![x.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (grads, _) = fif_loss(&np, &batch, &cfg, &mut rng).unwrap();

        let exact = |phi: &[f64], theta: &[f64]| -> f64 {
            let mut m = np.clone();
            m.phi.copy_from_slice(phi);
            m.theta.copy_from_slice(theta);
            let z = m.encode(&x);
            let x_hat = m.decode(&z);
            let recon: f64 = x_hat.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            cfg.prior.nll(&z) + exact_logdet(&m, &z).unwrap() + cfg.beta * recon
        };
        let fd_theta =
            finite_diff_grad(|p| exact(&np.phi, p), &np.theta, FD_STEP).unwrap();
        for (a, b) in grads.theta.iter().zip(&fd_theta) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "theta {a} vs {b}");
        }
        // for a linear decoder the log-det is z-independent, so the exact
        // φ-gradient is the prior + recon part the loss computes
        let fd_phi = finite_diff_grad(|p| exact(p, &np.theta), &np.phi, FD_STEP).unwrap();
        for (a, b) in grads.phi.iter().zip(&fd_phi) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "phi {a} vs {b}");
        }
    }

    #[test]
    fn naive_loss_projection_invariance() {
        let a = Matrix::from_vec(1, 2, vec![0.6, -0.8]);
        let np = nets::linear_pair(&a).unwrap();
        let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = vec![vec![0.9, 0.4], vec![-1.2, 0.3], vec![0.0, 2.0]];
        let projected: Vec<Vec<f64>> = xs.iter().map(|x| np.reconstruct(x)).collect();
        let (_, bd_x) = naive_nll_loss(&np, &row_matrix(xs), &cfg, &mut rng).unwrap();
        let (_, bd_p) = naive_nll_loss(&np, &row_matrix(projected), &cfg, &mut rng).unwrap();
        assert!((bd_x.total - bd_p.total).abs() < 1e-10);
    }

    #[test]
    fn naive_loss_bounded_below_by_projected_entropy() {
        // Gaussian data through a linear projector: the batch NLL cannot go
        // below the differential entropy of the projected latents (plus the
        // volume term, zero here for an orthonormal decoder column).
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let np = nets::linear_pair(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2000;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push(vec![
                2.0 * rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ]);
        }
        let batch = row_matrix(rows.clone());
        let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
        let (_, bd) = naive_nll_loss(&np, &batch, &cfg, &mut rng).unwrap();
        let zs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n as f64;
        let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln();
        assert!(bd.total >= entropy - 1e-6, "loss {} below entropy {entropy}", bd.total);
    }

    #[test]
    fn naive_encoder_gradient_chains_through_z() {
        // nonlinear square decoder: the log-det depends on z, so the encoder
        // gradient must include the chained term; verify against finite
        // differences of the full objective
        let np = nets::build(&ArchSpec {
            data_dim: 2,
            latent_dim: 2,
            hidden: vec![6],
            block: BlockKind::Mlp,
            activation: Act::Tanh,
            seed: 17,
        })
        .unwrap();
        let x = vec![0.5, -0.3];
        let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
        let batch = row_matrix(vec![x.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (grads, _) = naive_nll_loss(&np, &batch, &cfg, &mut rng).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut m = np.clone();
                m.phi.copy_from_slice(p);
                let z = m.encode(&x);
                cfg.prior.nll(&z) + exact_logdet(&m, &z).unwrap()
            },
            &np.phi,
            FD_STEP,
        )
        .unwrap();
        for (a, b) in grads.phi.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let fd_theta = finite_diff_grad(
            |p| {
                let mut m = np.clone();
                m.theta.copy_from_slice(p);
                let z = m.encode(&x);
                cfg.prior.nll(&z) + exact_logdet(&m, &z).unwrap()
            },
            &np.theta,
            FD_STEP,
        )
        .unwrap();
        for (a, b) in grads.theta.iter().zip(&fd_theta) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "theta {a} vs {b}");
        }
    }

    #[test]
    fn rf_decoder_gradient_matches_naive_on_linear_pair() {
        // β = 0: the CG baseline's θ-gradient is the exact decoder-side
        // log-det gradient once probes span the latent space
        let a = Matrix::from_vec(2, 3, vec![0.9, 0.1, 0.3, -0.2, 1.2, 0.0]);
        let np = nets::linear_pair(&a).unwrap();
        let x = vec![0.4, -0.6, 0.8];
        let batch = row_matrix(vec![x.clone()]);
        let cfg = LossConfig {
            beta: 0.0,
            k: 2,
            noise_kind: Some(NoiseKind::OrthogonalizedGaussian),
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (rf_grads, _) = rf_loss(&np, &batch, &cfg, 1e-12, 50, &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let (naive_grads, _) = naive_nll_loss(&np, &batch, &cfg, &mut rng2).unwrap();
        for (a, b) in rf_grads.theta.iter().zip(&naive_grads.theta) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_values_are_diagnosed() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let mut np = nets::linear_pair(&a).unwrap();
        np.phi[0] = 1e200;
        np.phi[1] = 1e200;
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let res = fif_loss(&np, &row_matrix(vec![vec![1e200, 1.0]]), &cfg, &mut rng);
        assert!(matches!(res, Err(LossError::NonFinite { .. })));
    }

    #[test]
    fn empty_batch_rejected() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let np = nets::linear_pair(&a).unwrap();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let empty = Matrix::zeros(0, 2);
        assert!(matches!(fif_loss(&np, &empty, &cfg, &mut rng), Err(LossError::EmptyBatch)));
    }

    #[test]
    fn augmentation_noise_perturbs_reconstruction() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let np = nets::linear_pair(&a).unwrap();
        let x = np.decode(&[0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clean = LossConfig::default();
        let noisy = LossConfig { noise_std: 0.1, ..LossConfig::default() };
        let batch = row_matrix(vec![x]);
        let (_, bd_clean) = fif_loss(&np, &batch, &clean, &mut rng).unwrap();
        let (_, bd_noisy) = fif_loss(&np, &batch, &noisy, &mut rng).unwrap();
        assert!(bd_clean.recon < 1e-20);
        assert!(bd_noisy.recon > 0.0);
    }
}
