//! Command-line front end: TOML run configs, artifact directories, and the
//! train / variance-study / phase-transition experiment drivers.
//!
//! Every run copies its fully resolved config into the output directory before
//! doing any work, so any artifact can be reproduced by pointing the binary at
//! that copy.

use std::path::{Path, PathBuf};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Dataset};
use crate::hutchinson::{self, NoiseKind};
use crate::linalg::Matrix;
use crate::linear_oracle;
use crate::losses::{self, LossConfig};
use crate::metrics;
use crate::nets::{ArchSpec, NetworkPair};
use crate::surrogate::{EstimatorVariant, TraceSpace};
use crate::trainer::{self, OptimState, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn num_err(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "fif", about = "Injective-flow training and estimator studies")]
pub struct CliArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's base seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output directory
    #[arg(long)]
    pub force: bool,
    /// Worker cap for multi-run sweeps (also capped by FIF_NUM_THREADS)
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Train,
    VarianceStudy,
    PhaseTransition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Sinusoid {
        n: usize,
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    LinearGaussian {
        n: usize,
        cov_diag: Vec<f64>,
        #[serde(default)]
        seed: u64,
    },
    Gmm {
        n: usize,
        means: Vec<Vec<f64>>,
        std: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_true")]
        standardize: bool,
        #[serde(default)]
        dequant_noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_true() -> bool {
    true
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Sinusoid { n, noise_std, seed } => {
            data::gen_sinusoid(*n, *noise_std, *seed).map_err(cfg_err)
        }
        DatasetSpec::LinearGaussian { n, cov_diag, seed } => {
            data::gen_gaussian(*n, &Matrix::diag(cov_diag), *seed).map_err(cfg_err)
        }
        DatasetSpec::Gmm { n, means, std, seed } => {
            data::gen_gmm(*n, means, *std, *seed).map_err(cfg_err)
        }
        DatasetSpec::Csv { path, standardize, dequant_noise, seed } => data::load_csv(
            path,
            &data::SplitSpec::Fractions { train: 0.8, val: 0.1 },
            *standardize,
            *dequant_noise,
            *seed,
        )
        .map_err(cfg_err),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceSpec {
    /// Probe space dimension for the symmetric-matrix study.
    pub d: usize,
    pub kinds: Vec<NoiseKind>,
    pub k_list: Vec<usize>,
    /// Total probes per (kind, K) cell.
    pub samples: usize,
    /// Data dimension of the MLP used for the gradient-distance curves.
    pub data_dim: usize,
    /// Latent dimension of that MLP.
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_grad_batch")]
    pub grad_batch: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}

fn default_grad_batch() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub betas: Vec<f64>,
    pub runs_per_beta: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: Option<DatasetSpec>,
    pub arch: Option<ArchSpec>,
    pub loss: Option<LossConfig>,
    pub train: Option<TrainConfig>,
    pub variance: Option<VarianceSpec>,
    pub phase: Option<PhaseSpec>,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(cfg_err)
}

/// Resolve CLI overrides, create the output directory, and persist the
/// effective config before the experiment runs.
pub fn prepare_run(args: &CliArgs) -> Result<(RunConfig, PathBuf, String)> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: set `out` or pass --out".into()))?;
    cfg.out = Some(out.clone());
    let copy = out.join("config.toml");
    if copy.exists() && !args.force {
        return Err(CliError::Config(format!(
            "refusing to overwrite existing run at {} (use --force)",
            out.display()
        )));
    }
    std::fs::create_dir_all(&out).map_err(cfg_err)?;
    let text = toml::to_string_pretty(&cfg).map_err(cfg_err)?;
    std::fs::write(&copy, &text).map_err(cfg_err)?;
    Ok((cfg, out, text))
}

pub fn effective_jobs(args: &CliArgs) -> usize {
    let env_cap = std::env::var("FIF_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(usize::MAX);
    args.jobs.unwrap_or(1).clamp(1, env_cap.max(1))
}

pub fn run(args: &CliArgs) -> Result<()> {
    let (cfg, out, text) = prepare_run(args)?;
    let jobs = effective_jobs(args);
    match cfg.experiment {
        Experiment::Train => cmd_train(&cfg, &out, &text),
        Experiment::VarianceStudy => cmd_variance_study(&cfg, &out),
        Experiment::PhaseTransition => cmd_phase_transition(&cfg, &out, jobs),
    }
}

fn require<'a, T>(field: &'static str, v: &'a Option<T>) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Config(format!("missing [{field}] section")))
}

fn write_metrics_csv(path: &Path, history: &[trainer::StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(cfg_err)?;
    for rec in history {
        w.serialize(rec).map_err(cfg_err)?;
    }
    w.flush().map_err(cfg_err)?;
    Ok(())
}

fn standard_normal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

fn mean_recon_mse(np: &NetworkPair, x: &Matrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.rows {
        let r = np.reconstruct(x.row(i));
        acc += r
            .iter()
            .zip(x.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    acc / x.rows.max(1) as f64
}

/// Decode latent prior samples into data space.
pub fn sample_model(np: &NetworkPair, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = np.latent_dim();
    let mut out = Matrix::zeros(n, np.data_dim());
    for i in 0..n {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let x = np.decode(&z);
        out.data[i * x.len()..(i + 1) * x.len()].copy_from_slice(&x);
    }
    out
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    recon_mse: f64,
    nll_prior: f64,
    surrogate: f64,
    total: f64,
    fid_like: Option<f64>,
    steps: u64,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, config_text: &str) -> Result<()> {
    let dataset = build_dataset(require("dataset", &cfg.dataset)?)?;
    let arch = require("arch", &cfg.arch)?;
    if arch.data_dim != dataset.dim() {
        return Err(CliError::Config(format!(
            "arch data_dim {} does not match dataset dim {}",
            arch.data_dim,
            dataset.dim()
        )));
    }
    let mut np = crate::nets::build(arch).map_err(cfg_err)?;
    let loss_cfg = cfg.loss.clone().unwrap_or_default();
    let mut train_cfg = cfg.train.clone().unwrap_or_default();
    train_cfg.seed = cfg.seed;

    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(cfg_err)?;
    let steps_per_epoch = dataset.train().rows.div_ceil(train_cfg.batch_size.max(1)) as u64;
    let st0 = OptimState::new(&np);
    let outcome = trainer::train(
        &mut np,
        &dataset,
        &loss_cfg,
        &train_cfg,
        st0,
        Some(&ckpt_dir),
        steps_per_epoch.max(1),
        trainer::config_hash(config_text),
    )
    .map_err(num_err)?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.history)?;

    let test = dataset.test();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5d_f1ca7e);
    let (_, bd) = losses::fif_loss(&np, &test, &loss_cfg, &mut rng).map_err(num_err)?;
    let fid = if test.rows > test.cols + 1 {
        let samples = sample_model(&np, test.rows, cfg.seed ^ 0x9a11);
        Some(metrics::fid_like(&samples, &test).map_err(num_err)?)
    } else {
        None
    };
    let summary = TrainSummary {
        recon_mse: mean_recon_mse(&np, &test),
        nll_prior: bd.nll_prior,
        surrogate: bd.surrogate,
        total: bd.total,
        fid_like: fid,
        steps: outcome.state.step,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(num_err)?;
    std::fs::write(out.join("summary.json"), json).map_err(cfg_err)?;
    Ok(())
}

pub fn cmd_variance_study(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = require("variance", &cfg.variance)?;
    if spec.d == 0 || spec.k_list.is_empty() || spec.kinds.is_empty() || spec.samples == 0 {
        return Err(CliError::Config("variance study needs d ≥ 1, kinds, k_list, samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut a = standard_normal_rows(spec.d, spec.d, &mut rng);
    a = a.symmetric_part();

    let mut w = csv::Writer::from_path(out.join("variance.csv")).map_err(cfg_err)?;
    w.write_record(["kind", "d", "k", "analytic_var", "empirical_var", "n_samples"])
        .map_err(cfg_err)?;
    for &kind in &spec.kinds {
        for &k in &spec.k_list {
            let analytic = hutchinson::analytic_variance(kind, k, &a).map_err(num_err)?;
            let reps = (spec.samples / k).max(2);
            let mut vals = Vec::with_capacity(reps);
            for _ in 0..reps {
                let noise = hutchinson::sample(kind, spec.d, k, &mut rng).map_err(num_err)?;
                vals.push(hutchinson::trace_estimate_matrix(&a, &noise).map_err(num_err)?);
            }
            let mean = vals.iter().sum::<f64>() / reps as f64;
            let emp =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0);
            w.write_record([
                format!("{}", serde_json::to_string(&kind).map_err(num_err)?.trim_matches('"')),
                spec.d.to_string(),
                k.to_string(),
                analytic.to_string(),
                emp.to_string(),
                reps.to_string(),
            ])
            .map_err(cfg_err)?;
        }
    }
    w.flush().map_err(cfg_err)?;

    // relative gradient distance curves in both trace spaces
    let arch = ArchSpec {
        data_dim: spec.data_dim,
        latent_dim: spec.latent_dim,
        hidden: spec.hidden.clone(),
        block: crate::nets::BlockKind::Mlp,
        activation: crate::autodiff::Act::Tanh,
        seed: cfg.seed,
    };
    let np = crate::nets::build(&arch).map_err(cfg_err)?;
    let x = standard_normal_rows(spec.grad_batch, spec.data_dim, &mut rng);
    let mut gw = csv::Writer::from_path(out.join("rel_grad_distance.csv")).map_err(cfg_err)?;
    gw.write_record(["trace_space", "k", "distance"]).map_err(cfg_err)?;
    for space in [TraceSpace::Latent, TraceSpace::Data] {
        let variant = EstimatorVariant { trace_space: space, ..EstimatorVariant::default() };
        let curve = metrics::rel_grad_distance(&np, &x, variant, &spec.k_list, cfg.seed ^ 0x6e)
            .map_err(num_err)?;
        let name = match space {
            TraceSpace::Latent => "latent",
            TraceSpace::Data => "data",
        };
        for (k, dist) in curve {
            gw.write_record([name.to_string(), k.to_string(), dist.to_string()])
                .map_err(cfg_err)?;
        }
    }
    gw.flush().map_err(cfg_err)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct PhaseRow {
    beta: f64,
    run: usize,
    recon_mse: f64,
    nll_prior: f64,
    surrogate: f64,
    total: f64,
    corr_curve: Option<f64>,
    corr_noise: Option<f64>,
    oracle_angle_deg: Option<f64>,
}

fn phase_single_run(
    cfg: &RunConfig,
    dataset_spec: &DatasetSpec,
    beta: f64,
    run: usize,
) -> Result<PhaseRow> {
    let seed = cfg
        .seed
        .wrapping_mul(0x100_0193)
        .wrapping_add((beta.to_bits() >> 17) ^ run as u64);
    let dataset = build_dataset(dataset_spec)?;
    let arch = require("arch", &cfg.arch)?;
    let mut arch = arch.clone();
    arch.seed = seed;
    let mut np = crate::nets::build(&arch).map_err(cfg_err)?;
    let mut loss_cfg = cfg.loss.clone().unwrap_or_default();
    loss_cfg.beta = beta;
    let mut train_cfg = cfg.train.clone().unwrap_or_default();
    train_cfg.seed = seed;
    let st0 = OptimState::new(&np);
    trainer::train(
        &mut np,
        &dataset,
        &loss_cfg,
        &train_cfg,
        st0,
        None,
        0,
        [0u8; 32],
    )
    .map_err(num_err)?;

    let test = dataset.test();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1u64);
    let (_, bd) = losses::fif_loss(&np, &test, &loss_cfg, &mut rng).map_err(num_err)?;
    let mut row = PhaseRow {
        beta,
        run,
        recon_mse: mean_recon_mse(&np, &test),
        nll_prior: bd.nll_prior,
        surrogate: bd.surrogate,
        total: bd.total,
        corr_curve: None,
        corr_noise: None,
        oracle_angle_deg: None,
    };
    match dataset_spec {
        DatasetSpec::Sinusoid { .. } => {
            let scores = metrics::manifold_alignment(&np, &test).map_err(num_err)?;
            row.corr_curve = Some(scores.corr_curve);
            row.corr_noise = Some(scores.corr_noise);
        }
        DatasetSpec::LinearGaussian { cov_diag, .. } => {
            let sigma2 = 1.0 / (2.0 * beta);
            let sigma = Matrix::diag(cov_diag);
            let oracle = linear_oracle::optimal_selection(&sigma, sigma2, np.latent_dim())
                .map_err(num_err)?;
            row.oracle_angle_deg = Some(
                decoder_subspace_angle_deg(&np, &oracle.selected_subspace).map_err(num_err)?,
            );
        }
        _ => {}
    }
    Ok(row)
}

/// Largest principal angle (degrees) between the decoder's tangent space at
/// the latent origin and a reference subspace.
pub fn decoder_subspace_angle_deg(
    np: &NetworkPair,
    reference: &Matrix,
) -> std::result::Result<f64, String> {
    let z0 = vec![0.0; np.latent_dim()];
    let j = crate::autodiff::full_jacobian(&np.decoder, &np.theta, &z0).map_err(|e| e.to_string())?;
    let angles = linear_oracle::principal_angles(&j, reference).map_err(|e| e.to_string())?;
    let max = angles.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(max.to_degrees())
}

pub fn cmd_phase_transition(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<()> {
    let spec = require("phase", &cfg.phase)?;
    let dataset_spec = require("dataset", &cfg.dataset)?;
    if spec.betas.is_empty() || spec.runs_per_beta == 0 {
        return Err(CliError::Config("phase transition needs betas and runs_per_beta ≥ 1".into()));
    }
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for &beta in &spec.betas {
        if beta <= 0.0 {
            return Err(CliError::Config(format!("beta must be positive, got {beta}")));
        }
        for run in 0..spec.runs_per_beta {
            cells.push((beta, run));
        }
    }
    let mut rows: Vec<Result<PhaseRow>> = Vec::with_capacity(cells.len());
    if jobs <= 1 {
        for &(beta, run) in &cells {
            rows.push(phase_single_run(cfg, dataset_spec, beta, run));
        }
    } else {
        // deterministic fan-out: each cell's seed depends only on (beta, run)
        let results: Vec<std::sync::Mutex<Option<Result<PhaseRow>>>> =
            cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..jobs.min(cells.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let (beta, run) = cells[i];
                    let r = phase_single_run(cfg, dataset_spec, beta, run);
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
        for slot in results {
            rows.push(slot.into_inner().unwrap().expect("worker completed"));
        }
    }
    let mut w = csv::Writer::from_path(out.join("phase.csv")).map_err(cfg_err)?;
    for row in rows {
        w.serialize(row?).map_err(cfg_err)?;
    }
    w.flush().map_err(cfg_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, body).unwrap();
        p
    }

    fn args(config: PathBuf, out: PathBuf, force: bool) -> CliArgs {
        CliArgs { config, seed: None, out: Some(out), force, jobs: None }
    }

    const TRAIN_TOML: &str = r#"
experiment = "train"
seed = 7

[dataset]
kind = "sinusoid"
n = 200
noise_std = 0.1
seed = 1

[arch]
data_dim = 2
latent_dim = 1
hidden = [8]
activation = "silu"
seed = 0

[arch.block]
kind = "mlp"

[loss]
beta = 10.0
k = 1
prior = "standard_normal"
noise_std = 0.0

[loss.variant]
grad_target = "encoder"
trace_space = "latent"
jacobian_site = "off_manifold"

[train]
epochs = 2
batch_size = 32
one_cycle = true
loss_kind = "fif"
val_every = 0
seed = 0

[train.hyper]
lr = 0.001
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
weight_decay = 0.0
"#;

    #[test]
    fn train_run_produces_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_cfg(dir.path(), TRAIN_TOML);
        let out = dir.path().join("run1");
        run(&args(cfg_path, out.clone(), false)).unwrap();
        assert!(out.join("config.toml").exists());
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("checkpoints/latest.ckpt").exists());
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        assert!(summary["recon_mse"].as_f64().unwrap().is_finite());
        assert!(summary["fid_like"].as_f64().unwrap().is_finite());
    }

    #[test]
    fn rerun_without_force_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_cfg(dir.path(), TRAIN_TOML);
        let out = dir.path().join("run1");
        run(&args(cfg_path.clone(), out.clone(), false)).unwrap();
        match run(&args(cfg_path.clone(), out.clone(), false)) {
            Err(CliError::Config(msg)) => assert!(msg.contains("--force"), "{msg}"),
            other => panic!("expected refusal, got {other:?}"),
        }
        run(&args(cfg_path, out, true)).unwrap();
    }

    #[test]
    fn rerun_from_emitted_config_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_cfg(dir.path(), TRAIN_TOML);
        let out1 = dir.path().join("a");
        run(&args(cfg_path, out1.clone(), false)).unwrap();
        let out2 = dir.path().join("b");
        run(&args(out1.join("config.toml"), out2.clone(), false)).unwrap();
        let m1 = std::fs::read(out1.join("metrics.csv")).unwrap();
        let m2 = std::fs::read(out2.join("metrics.csv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn invalid_key_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let bad = TRAIN_TOML.replace("seed = 7", "seed = 7\nbanana = 1");
        let cfg_path = write_cfg(dir.path(), &bad);
        match run(&args(cfg_path, dir.path().join("x"), false)) {
            Err(CliError::Config(msg)) => assert!(msg.contains("banana"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn config_error_exit_code_is_two() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 3);
    }

    #[test]
    fn variance_study_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let toml = r#"
experiment = "variance_study"
seed = 3

[variance]
d = 4
kinds = ["rademacher", "gaussian"]
k_list = [1, 2, 4]
samples = 2000
data_dim = 6
latent_dim = 3
"#;
        let cfg_path = write_cfg(dir.path(), toml);
        let out = dir.path().join("vs");
        run(&args(cfg_path, out.clone(), false)).unwrap();
        let body = std::fs::read_to_string(out.join("variance.csv")).unwrap();
        assert_eq!(body.lines().count(), 1 + 2 * 3);
        let grads = std::fs::read_to_string(out.join("rel_grad_distance.csv")).unwrap();
        assert_eq!(grads.lines().count(), 1 + 2 * 3);
    }

    #[test]
    fn phase_transition_single_run_csv() {
        let dir = tempfile::tempdir().unwrap();
        let toml = r#"
experiment = "phase_transition"
seed = 11

[dataset]
kind = "linear_gaussian"
n = 300
cov_diag = [4.0, 1.0, 0.25]
seed = 2

[arch]
data_dim = 3
latent_dim = 1
hidden = []
activation = "relu"
seed = 0

[arch.block]
kind = "mlp"

[train]
epochs = 2
batch_size = 64
one_cycle = true
loss_kind = "fif"
val_every = 0
seed = 0

[train.hyper]
lr = 0.005
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
weight_decay = 0.0

[phase]
betas = [5.0]
runs_per_beta = 1
"#;
        let cfg_path = write_cfg(dir.path(), toml);
        let out = dir.path().join("pt");
        run(&args(cfg_path, out.clone(), false)).unwrap();
        let body = std::fs::read_to_string(out.join("phase.csv")).unwrap();
        assert_eq!(body.lines().count(), 2);
        let header = body.lines().next().unwrap();
        assert!(header.contains("oracle_angle_deg"));
    }
}
