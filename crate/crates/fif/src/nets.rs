//! Encoder/decoder construction, initialization, and flat parameter management.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Act, Layer, Network};
use crate::linalg::{pinv, Matrix, PINV_REL_CUTOFF};

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("rank-deficient matrix: smallest singular value {0:.3e}")]
    RankDeficient(f64),
    #[error("parameter length mismatch: expected {expected}, got {got}")]
    ParamLength { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, NetsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

/// Body style: a plain MLP, or an MLP trunk followed by residual blocks. Each
/// residual block wraps two hidden layers of the given width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockKind {
    Mlp,
    Residual { blocks: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub block: BlockKind,
    pub activation: Act,
    pub seed: u64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.data_dim == 0 {
            return Err(NetsError::InvalidArch("dims must be positive".into()));
        }
        if self.latent_dim > self.data_dim {
            return Err(NetsError::InvalidArch(format!(
                "latent dim {} exceeds data dim {}",
                self.latent_dim, self.data_dim
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(NetsError::InvalidArch("hidden widths must be positive".into()));
        }
        if let BlockKind::Residual { blocks, width } = self.block {
            if blocks > 0 && width == 0 {
                return Err(NetsError::InvalidArch("residual width must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Encoder f: R^D → R^d and decoder g: R^d → R^D over flat parameter vectors.
#[derive(Debug, Clone)]
pub struct NetworkPair {
    pub encoder: Network,
    pub decoder: Network,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub spec: Option<ArchSpec>,
}

impl NetworkPair {
    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let (z, _) = autodiff::eval(&self.encoder, &self.phi, x).expect("encode");
        z
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let (y, _) = autodiff::eval(&self.decoder, &self.theta, z).expect("decode");
        y
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        self.decode(&self.encode(x))
    }

    pub fn get_params(&self, side: Side) -> &[f64] {
        match side {
            Side::Encoder => &self.phi,
            Side::Decoder => &self.theta,
        }
    }

    pub fn set_params(&mut self, side: Side, v: &[f64]) -> Result<()> {
        let (slot, expected) = match side {
            Side::Encoder => (&mut self.phi, self.encoder.param_len),
            Side::Decoder => (&mut self.theta, self.decoder.param_len),
        };
        if v.len() != expected {
            return Err(NetsError::ParamLength { expected, got: v.len() });
        }
        slot.copy_from_slice(v);
        Ok(())
    }
}

struct LayerPlan {
    in_dim: usize,
    out_dim: usize,
    /// Final layer of the whole network (no activation; encoder applies the
    /// 0.1 output scaling here).
    is_output: bool,
}

fn affine(layers: &mut Vec<Layer>, next: &mut usize, plan: &LayerPlan) -> Layer {
    let w = plan.out_dim * plan.in_dim;
    let layer = Layer::Affine {
        in_dim: plan.in_dim,
        out_dim: plan.out_dim,
        weight: *next..*next + w,
        bias: *next + w..*next + w + plan.out_dim,
    };
    *next += w + plan.out_dim;
    layers.push(layer.clone());
    layer
}

fn init_affine(params: &mut Vec<f64>, plan: &LayerPlan, act: Act, scale: f64, rng: &mut ChaCha8Rng) {
    // Kaiming fan-in for ReLU, Xavier otherwise; zero biases.
    let bound = match act {
        Act::Relu => (6.0 / plan.in_dim as f64).sqrt(),
        Act::Silu | Act::Tanh => (6.0 / (plan.in_dim + plan.out_dim) as f64).sqrt(),
    };
    for _ in 0..plan.out_dim * plan.in_dim {
        params.push(rng.gen_range(-bound..bound) * scale);
    }
    params.extend(std::iter::repeat(0.0).take(plan.out_dim));
}

/// One side of the pair: MLP trunk over `hidden`, optional residual blocks at
/// the trunk's final width, then a linear head to `out_dim`.
fn build_side(
    in_dim: usize,
    out_dim: usize,
    spec: &ArchSpec,
    output_scale: f64,
    rng: &mut ChaCha8Rng,
) -> (Network, Vec<f64>) {
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut next = 0usize;
    let mut cur = in_dim;
    for &h in &spec.hidden {
        let plan = LayerPlan { in_dim: cur, out_dim: h, is_output: false };
        affine(&mut layers, &mut next, &plan);
        init_affine(&mut params, &plan, spec.activation, 1.0, rng);
        layers.push(Layer::Activation(spec.activation));
        cur = h;
    }
    if let BlockKind::Residual { blocks, width } = spec.block {
        for _ in 0..blocks {
            let mut inner = Vec::new();
            let plans = [
                LayerPlan { in_dim: cur, out_dim: width, is_output: false },
                LayerPlan { in_dim: width, out_dim: width, is_output: false },
                LayerPlan { in_dim: width, out_dim: cur, is_output: false },
            ];
            for (i, plan) in plans.iter().enumerate() {
                affine(&mut inner, &mut next, plan);
                init_affine(&mut params, plan, spec.activation, 1.0, rng);
                if i < 2 {
                    inner.push(Layer::Activation(spec.activation));
                }
            }
            layers.push(Layer::Residual(inner));
        }
    }
    let plan = LayerPlan { in_dim: cur, out_dim, is_output: true };
    affine(&mut layers, &mut next, &plan);
    init_affine(&mut params, &plan, spec.activation, output_scale, rng);
    debug_assert!(plan.is_output);
    let net = Network { input_dim: in_dim, output_dim: out_dim, layers, param_len: next };
    (net, params)
}

/// Deterministic construction from an architecture spec. The decoder mirrors
/// the encoder's layout (hidden widths reversed) with independent parameters.
/// The encoder's output layer is scaled by 0.1 so initial latents sit near the
/// bulk of a standard-normal prior.
pub fn build(spec: &ArchSpec) -> Result<NetworkPair> {
    spec.validate()?;
    let mut enc_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    enc_rng.set_stream(0);
    let (encoder, phi) = build_side(spec.data_dim, spec.latent_dim, spec, 0.1, &mut enc_rng);
    let mut dec_spec = spec.clone();
    dec_spec.hidden.reverse();
    let mut dec_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    dec_rng.set_stream(1);
    let (decoder, theta) = build_side(spec.latent_dim, spec.data_dim, &dec_spec, 1.0, &mut dec_rng);
    Ok(NetworkPair { encoder, decoder, phi, theta, spec: Some(spec.clone()) })
}

fn single_affine(in_dim: usize, out_dim: usize, weights: &Matrix) -> (Network, Vec<f64>) {
    let mut params = weights.data.clone();
    params.extend(std::iter::repeat(0.0).take(out_dim));
    let w = out_dim * in_dim;
    let net = Network {
        input_dim: in_dim,
        output_dim: out_dim,
        layers: vec![Layer::Affine { in_dim, out_dim, weight: 0..w, bias: w..w + out_dim }],
        param_len: w + out_dim,
    };
    (net, params)
}

/// Exactly-linear pair: encoder x ↦ Ax, decoder z ↦ A†z. The consistent
/// configuration used by the closed-form oracles.
pub fn linear_pair(a: &Matrix) -> Result<NetworkPair> {
    let (d, big_d) = (a.rows, a.cols);
    if d > big_d {
        return Err(NetsError::InvalidArch(format!("A must be d×D with d ≤ D, got {d}×{big_d}")));
    }
    let (_, s, _) = crate::linalg::svd(a)?;
    let smin = s.last().copied().unwrap_or(0.0);
    if smin <= PINV_REL_CUTOFF * s[0].max(1.0) {
        return Err(NetsError::RankDeficient(smin));
    }
    let a_pinv = pinv(a, PINV_REL_CUTOFF)?;
    let (encoder, phi) = single_affine(big_d, d, a);
    let (decoder, theta) = single_affine(d, big_d, &a_pinv);
    Ok(NetworkPair { encoder, decoder, phi, theta, spec: None })
}
