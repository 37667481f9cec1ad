//! Adam-with-one-cycle training loop, binary checkpoints, and deterministic
//! replay.
//!
//! Every batch shuffle and probe draw is seeded from (run seed, step index),
//! so resuming from a checkpoint reproduces the uninterrupted run bit for bit.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::losses::{self, BatchGrads, LossBreakdown, LossConfig};
use crate::nets::{ArchSpec, NetworkPair, Side};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite { step: u64, source: losses::LossError },
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint arch mismatch:\n{0}")]
    ArchMismatch(String),
    #[error(transparent)]
    Nets(#[from] crate::nets::NetsError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-group moment buffers plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m_phi: Vec<f64>,
    pub v_phi: Vec<f64>,
    pub m_theta: Vec<f64>,
    pub v_theta: Vec<f64>,
}

impl OptimState {
    pub fn new(np: &NetworkPair) -> OptimState {
        OptimState {
            step: 0,
            m_phi: vec![0.0; np.phi.len()],
            v_phi: vec![0.0; np.phi.len()],
            m_theta: vec![0.0; np.theta.len()],
            v_theta: vec![0.0; np.theta.len()],
        }
    }
}

/// One decoupled-weight-decay Adam update for a single parameter group, using
/// the already-incremented `state.step` for bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(TrainerError::ShapeMismatch(format!(
            "params {} grads {} m {} v {}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for i in 0..params.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grads[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * params[i]);
    }
    Ok(())
}

pub const ONE_CYCLE_WARMUP_FRAC: f64 = 0.3;
const ONE_CYCLE_START_DIV: f64 = 25.0;
const ONE_CYCLE_FINAL_DIV: f64 = 1e4;

/// One-cycle schedule: linear warmup to `max_lr` over the first 30% of
/// training, then cosine annealing to `max_lr / 1e4`.
pub fn one_cycle_lr(step: u64, total_steps: u64, max_lr: f64) -> f64 {
    if total_steps <= 1 {
        return max_lr;
    }
    let warm = ((total_steps as f64) * ONE_CYCLE_WARMUP_FRAC).max(1.0);
    let t = step as f64;
    if t < warm {
        let lo = max_lr / ONE_CYCLE_START_DIV;
        lo + (max_lr - lo) * t / warm
    } else {
        let lo = max_lr / ONE_CYCLE_FINAL_DIV;
        let frac = ((t - warm) / ((total_steps as f64 - warm).max(1.0))).min(1.0);
        lo + 0.5 * (max_lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Fif,
    NaiveNll,
    Rf,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: AdamHyper,
    /// None disables the schedule and uses a constant learning rate.
    pub one_cycle: bool,
    /// Global-norm gradient clip; None disables clipping.
    pub grad_clip: Option<f64>,
    pub loss_kind: LossKind,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 64,
            hyper: AdamHyper::default(),
            one_cycle: true,
            grad_clip: None,
            loss_kind: LossKind::Fif,
            val_every: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub nll_prior: f64,
    pub surrogate: f64,
    pub recon: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub state: OptimState,
}

fn mix_seed(seed: u64, salt: u64, idx: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ salt.rotate_left(17) ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5u64, epoch as u64));
    idx.shuffle(&mut rng);
    idx
}

fn gather_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), x.cols);
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..x.cols {
            out[(r, c)] = x[(i, c)];
        }
    }
    out
}

fn eval_loss<R: rand::Rng>(
    kind: LossKind,
    np: &NetworkPair,
    batch: &Matrix,
    cfg: &LossConfig,
    rng: &mut R,
) -> losses::Result<(BatchGrads, LossBreakdown)> {
    match kind {
        LossKind::Fif => losses::fif_loss(np, batch, cfg, rng),
        LossKind::NaiveNll => losses::naive_nll_loss(np, batch, cfg, rng),
        LossKind::Rf => {
            let max_iter = crate::surrogate::cg_default_max_iter(np.latent_dim());
            losses::rf_loss(np, batch, cfg, 1e-6, max_iter, rng)
        }
    }
}

fn clip_grads(grads: &mut BatchGrads, max_norm: f64) {
    let norm: f64 = grads
        .phi
        .iter()
        .chain(grads.theta.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.phi.iter_mut().chain(grads.theta.iter_mut()) {
            *g *= s;
        }
    }
}

/// Mean validation loss with a step-derived probe stream, so validation never
/// perturbs the training randomness.
fn validation_loss(
    np: &NetworkPair,
    val: &Matrix,
    kind: LossKind,
    cfg: &LossConfig,
    seed: u64,
    step: u64,
) -> losses::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a1u64, step));
    let (_, bd) = eval_loss(kind, np, val, cfg, &mut rng)?;
    Ok(bd.total)
}

/// Run (or resume) training. Optimization starts from `state.step`; pass a
/// fresh `OptimState` for a new run. Checkpoints, when a directory is given,
/// are written atomically every `checkpoint_every` steps and at the end; a
/// non-finite loss aborts without touching the last checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train(
    np: &mut NetworkPair,
    dataset: &Dataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut state: OptimState,
    checkpoint_dir: Option<&Path>,
    checkpoint_every: u64,
    config_hash: [u8; 32],
) -> Result<TrainOutcome> {
    let train_x = dataset.train();
    let n = train_x.rows;
    if n == 0 || cfg.batch_size == 0 {
        return Err(TrainerError::ShapeMismatch("empty training set or batch".into()));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let val = dataset.val();
    let mut history = Vec::new();

    while state.step < total_steps {
        let step = state.step;
        let epoch = (step / steps_per_epoch) as usize;
        let pos = (step % steps_per_epoch) as usize;
        let order = shuffled_indices(n, cfg.seed, epoch);
        let lo = pos * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let batch = gather_rows(&train_x, &order[lo..hi]);

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x57e9u64, step));
        let (mut grads, bd) = match eval_loss(cfg.loss_kind, np, &batch, loss_cfg, &mut rng) {
            Ok(r) => r,
            Err(e @ losses::LossError::NonFinite { .. }) => {
                return Err(TrainerError::NonFinite { step, source: e });
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(max_norm) = cfg.grad_clip {
            clip_grads(&mut grads, max_norm);
        }

        let lr = if cfg.one_cycle {
            one_cycle_lr(step, total_steps, cfg.hyper.lr)
        } else {
            cfg.hyper.lr
        };
        state.step += 1;
        let mut phi = np.phi.clone();
        let mut theta = np.theta.clone();
        adam_step(&mut phi, &grads.phi, &mut state.m_phi, &mut state.v_phi, state.step, &cfg.hyper, lr)?;
        adam_step(&mut theta, &grads.theta, &mut state.m_theta, &mut state.v_theta, state.step, &cfg.hyper, lr)?;
        np.set_params(Side::Encoder, &phi)?;
        np.set_params(Side::Decoder, &theta)?;

        let val_total = if cfg.val_every > 0 && state.step % cfg.val_every as u64 == 0 && val.rows > 0 {
            Some(validation_loss(np, &val, cfg.loss_kind, loss_cfg, cfg.seed, state.step)?)
        } else {
            None
        };
        history.push(StepRecord {
            step: state.step,
            epoch,
            lr,
            nll_prior: bd.nll_prior,
            surrogate: bd.surrogate,
            recon: bd.recon,
            total: bd.total,
            val_total,
        });

        if let Some(dir) = checkpoint_dir {
            if checkpoint_every > 0 && (state.step % checkpoint_every == 0 || state.step == total_steps) {
                let ckpt = Checkpoint::capture(np, &state, cfg.seed, config_hash, history.len() as u64);
                save_checkpoint(&ckpt, &dir.join("latest.ckpt"))?;
            }
        }
    }
    Ok(TrainOutcome { history, state })
}

const CKPT_MAGIC: &[u8; 8] = b"FIFCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: Option<ArchSpec>,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub state: OptimState,
    pub seed: u64,
    pub config_hash: [u8; 32],
    /// Number of metric rows already emitted when this checkpoint was taken.
    pub metrics_cursor: u64,
}

impl Checkpoint {
    pub fn capture(
        np: &NetworkPair,
        state: &OptimState,
        seed: u64,
        config_hash: [u8; 32],
        metrics_cursor: u64,
    ) -> Checkpoint {
        Checkpoint {
            arch: np.spec.clone(),
            phi: np.phi.clone(),
            theta: np.theta.clone(),
            state: state.clone(),
            seed,
            config_hash,
            metrics_cursor,
        }
    }

    /// Install parameters into a freshly built pair, refusing on architecture
    /// disagreement.
    pub fn restore_into(&self, np: &mut NetworkPair) -> Result<OptimState> {
        if let (Some(a), Some(b)) = (&self.arch, &np.spec) {
            if a != b {
                let mut diff = String::new();
                let aj = serde_json::to_string(a).unwrap_or_default();
                let bj = serde_json::to_string(b).unwrap_or_default();
                diff.push_str(&format!("  checkpoint: {aj}\n  target:     {bj}"));
                return Err(TrainerError::ArchMismatch(diff));
            }
        }
        if self.phi.len() != np.phi.len() || self.theta.len() != np.theta.len() {
            return Err(TrainerError::ArchMismatch(format!(
                "  parameter counts: checkpoint phi {} theta {}, target phi {} theta {}",
                self.phi.len(),
                self.theta.len(),
                np.phi.len(),
                np.theta.len()
            )));
        }
        np.set_params(Side::Encoder, &self.phi)?;
        np.set_params(Side::Decoder, &self.theta)?;
        Ok(self.state.clone())
    }
}

pub fn config_hash(config_text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    h.finalize().into()
}

fn write_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(TrainerError::CheckpointFormat("float section length not a multiple of 8".into()));
    }
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let arch_json = serde_json::to_vec(&ckpt.arch)
        .map_err(|e| TrainerError::CheckpointFormat(e.to_string()))?;
    write_section(&mut out, "arch", &arch_json);
    write_section(&mut out, "phi", &f64s_to_bytes(&ckpt.phi));
    write_section(&mut out, "theta", &f64s_to_bytes(&ckpt.theta));
    let mut meta = Vec::new();
    meta.extend_from_slice(&ckpt.state.step.to_le_bytes());
    meta.extend_from_slice(&ckpt.seed.to_le_bytes());
    meta.extend_from_slice(&ckpt.metrics_cursor.to_le_bytes());
    write_section(&mut out, "meta", &meta);
    write_section(&mut out, "m_phi", &f64s_to_bytes(&ckpt.state.m_phi));
    write_section(&mut out, "v_phi", &f64s_to_bytes(&ckpt.state.v_phi));
    write_section(&mut out, "m_theta", &f64s_to_bytes(&ckpt.state.m_theta));
    write_section(&mut out, "v_theta", &f64s_to_bytes(&ckpt.state.v_theta));
    write_section(&mut out, "config_hash", &ckpt.config_hash);

    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(TrainerError::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(TrainerError::CheckpointFormat(format!(
            "unsupported version {version}, expected {CKPT_VERSION}"
        )));
    }
    let mut sections = std::collections::HashMap::new();
    let mut pos = 12;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(TrainerError::CheckpointFormat("truncated section header".into()));
        }
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + name_len + 8 > bytes.len() {
            return Err(TrainerError::CheckpointFormat("truncated section name".into()));
        }
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| TrainerError::CheckpointFormat("non-utf8 section name".into()))?;
        pos += name_len;
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if pos + len > bytes.len() {
            return Err(TrainerError::CheckpointFormat(format!("truncated section {name}")));
        }
        sections.insert(name, bytes[pos..pos + len].to_vec());
        pos += len;
    }
    let get = |name: &str| {
        sections
            .get(name)
            .ok_or_else(|| TrainerError::CheckpointFormat(format!("missing section {name}")))
    };
    let arch: Option<ArchSpec> = serde_json::from_slice(get("arch")?)
        .map_err(|e| TrainerError::CheckpointFormat(e.to_string()))?;
    let meta = get("meta")?;
    if meta.len() != 24 {
        return Err(TrainerError::CheckpointFormat("meta section size".into()));
    }
    let step = u64::from_le_bytes(meta[0..8].try_into().unwrap());
    let seed = u64::from_le_bytes(meta[8..16].try_into().unwrap());
    let metrics_cursor = u64::from_le_bytes(meta[16..24].try_into().unwrap());
    let hash_bytes = get("config_hash")?;
    let config_hash: [u8; 32] = hash_bytes
        .as_slice()
        .try_into()
        .map_err(|_| TrainerError::CheckpointFormat("config hash size".into()))?;
    Ok(Checkpoint {
        arch,
        phi: bytes_to_f64s(get("phi")?)?,
        theta: bytes_to_f64s(get("theta")?)?,
        state: OptimState {
            step,
            m_phi: bytes_to_f64s(get("m_phi")?)?,
            v_phi: bytes_to_f64s(get("v_phi")?)?,
            m_theta: bytes_to_f64s(get("m_theta")?)?,
            v_theta: bytes_to_f64s(get("v_theta")?)?,
        },
        seed,
        config_hash,
        metrics_cursor,
    })
}
