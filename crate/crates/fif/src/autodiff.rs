//! Tape-based automatic differentiation over dense vector computations.
//!
//! The tape records primitive ops (matvec, add, elementwise activations,
//! concat/slice, dot, stop-gradient) during a forward pass and supports a
//! single reverse sweep per tape. Evaluation is generic over the scalar type:
//! running the same tape on [`Dual`] numbers gives forward-mode Jacobian-vector
//! products, and a reverse sweep over a dual-valued tape yields the
//! forward-over-reverse second-order contractions needed by the
//! log-determinant surrogate.

use std::ops::{Add, Div, Mul, Neg, Range, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Scalar abstraction: `f64` for plain evaluation, [`Dual`] for forward mode.
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// The primal (value) part.
    fn primal(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn primal(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number: carries a value and one tangent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
    pub fn constant(re: f64) -> Self {
        Dual { re, du: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.re / o.re, (self.du * o.re - self.re * o.du) / (o.re * o.re))
    }
}
impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn primal(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
}

/// Elementwise activations supported on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Relu,
    Silu,
    Tanh,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl Act {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Act::Relu => {
                if x.primal() > 0.0 {
                    x
                } else {
                    S::zero()
                }
            }
            Act::Silu => x * sigmoid(x),
            Act::Tanh => x.tanh(),
        }
    }

    pub fn deriv<S: Scalar>(self, x: S) -> S {
        match self {
            Act::Relu => {
                if x.primal() > 0.0 {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Act::Silu => {
                let s = sigmoid(x);
                s * (S::one() + x * (S::one() - s))
            }
            Act::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
        }
    }
}

/// Network layer primitives. Affine layers reference ranges of a flat
/// parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Affine {
        in_dim: usize,
        out_dim: usize,
        weight: Range<usize>,
        bias: Range<usize>,
    },
    Activation(Act),
    /// y = x + inner(x)
    Residual(Vec<Layer>),
}

/// A feed-forward network: an ordered layer list over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
    pub param_len: usize,
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    /// Leaf bound to `space[offset..offset+len]` of a flat parameter vector.
    Param { space: usize, offset: usize },
    /// inputs: [weight (rows*cols), x (cols)] -> rows
    MatVec { rows: usize, cols: usize },
    Add,
    Sub,
    Dot,
    Scale(f64),
    Act(Act),
    Concat,
    Slice { start: usize, len: usize },
    StopGradient,
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Vec<S>,
}

/// Recorded forward computation. One backward pass per tape.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    param_space_lens: Vec<usize>,
    consumed: bool,
    pub input_node: Option<NodeId>,
    pub output_node: Option<NodeId>,
}

/// Result of a reverse sweep: adjoints per node plus flat parameter gradients
/// per parameter space.
pub struct BackwardResult<S> {
    adjoints: Vec<Option<Vec<S>>>,
    pub param_grads: Vec<Vec<S>>,
}

impl<S> BackwardResult<S> {
    pub fn adjoint(&self, node: NodeId) -> Option<&[S]> {
        self.adjoints[node].as_deref()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new(param_space_lens: Vec<usize>) -> Self {
        Tape {
            nodes: Vec::new(),
            param_space_lens,
            consumed: false,
            input_node: None,
            output_node: None,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Vec<S>) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, node: NodeId) -> &[S] {
        &self.nodes[node].value
    }

    pub fn input(&mut self, x: Vec<S>) -> NodeId {
        self.push(Op::Input, vec![], x)
    }

    pub fn constant(&mut self, x: Vec<S>) -> NodeId {
        self.push(Op::Const, vec![], x)
    }

    pub fn param(&mut self, space: usize, range: Range<usize>, params: &[f64]) -> NodeId {
        let value = params[range.clone()].iter().map(|&v| S::from_f64(v)).collect();
        self.push(Op::Param { space, offset: range.start }, vec![], value)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let cols = self.nodes[x].value.len();
        let rows = self.nodes[w].value.len() / cols;
        let mut out = vec![S::zero(); rows];
        for i in 0..rows {
            let mut acc = S::zero();
            for j in 0..cols {
                acc = acc + self.nodes[w].value[i * cols + j] * self.nodes[x].value[j];
            }
            out[i] = acc;
        }
        self.push(Op::MatVec { rows, cols }, vec![w, x], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<S> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<S> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut acc = S::zero();
        for (&x, &y) in self.nodes[a].value.iter().zip(&self.nodes[b].value) {
            acc = acc + x * y;
        }
        self.push(Op::Dot, vec![a, b], vec![acc])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64(c);
        let v: Vec<S> = self.nodes[a].value.iter().map(|&x| x * cs).collect();
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn act(&mut self, act: Act, a: NodeId) -> NodeId {
        let v: Vec<S> = self.nodes[a].value.iter().map(|&x| act.apply(x)).collect();
        self.push(Op::Act(act), vec![a], v)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = Vec::new();
        for &p in parts {
            v.extend_from_slice(&self.nodes[p].value);
        }
        self.push(Op::Concat, parts.to_vec(), v)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a].value[start..start + len].to_vec();
        self.push(Op::Slice { start, len }, vec![a], v)
    }

    /// Identity in the forward pass, blocks all gradient in the reverse pass.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(Op::StopGradient, vec![a], v)
    }

    /// Record a network forward pass starting from `x_node`, reading parameters
    /// from `params` into parameter space `space`. Returns the output node.
    pub fn network(
        &mut self,
        net: &Network,
        params: &[f64],
        space: usize,
        x_node: NodeId,
    ) -> Result<NodeId> {
        let got = self.nodes[x_node].value.len();
        if got != net.input_dim {
            return Err(AutodiffError::DimensionMismatch { expected: net.input_dim, got });
        }
        self.layers(&net.layers, params, space, x_node)
    }

    fn layers(
        &mut self,
        layers: &[Layer],
        params: &[f64],
        space: usize,
        mut cur: NodeId,
    ) -> Result<NodeId> {
        for layer in layers {
            cur = match layer {
                Layer::Affine { weight, bias, .. } => {
                    let w = self.param(space, weight.clone(), params);
                    let mv = self.matvec(w, cur);
                    let b = self.param(space, bias.clone(), params);
                    self.add(mv, b)
                }
                Layer::Activation(a) => self.act(*a, cur),
                Layer::Residual(inner) => {
                    let y = self.layers(inner, params, space, cur)?;
                    self.add(cur, y)
                }
            };
        }
        Ok(cur)
    }

    /// Reverse sweep seeded with `cotangent` at `node`. Consumes the tape.
    pub fn backward(&mut self, node: NodeId, cotangent: &[S]) -> Result<BackwardResult<S>> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        self.consumed = true;
        let expected = self.nodes[node].value.len();
        if cotangent.len() != expected {
            return Err(AutodiffError::DimensionMismatch { expected, got: cotangent.len() });
        }
        let mut adjoints: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        adjoints[node] = Some(cotangent.to_vec());
        let mut param_grads: Vec<Vec<S>> = self
            .param_space_lens
            .iter()
            .map(|&l| vec![S::zero(); l])
            .collect();

        for id in (0..=node).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            let (op, inputs) = {
                let n = &self.nodes[id];
                (n.op.clone(), n.inputs.clone())
            };
            let bump = |adjs: &mut Vec<Option<Vec<S>>>, target: NodeId, delta: &[S]| {
                let slot = adjs[target]
                    .get_or_insert_with(|| vec![S::zero(); delta.len()]);
                for (s, &d) in slot.iter_mut().zip(delta) {
                    *s = *s + d;
                }
            };
            match op {
                Op::Input | Op::Const => {}
                Op::Param { space, offset } => {
                    let g = &mut param_grads[space];
                    for (k, &a) in adj.iter().enumerate() {
                        g[offset + k] = g[offset + k] + a;
                    }
                    continue;
                }
                Op::MatVec { rows, cols } => {
                    let (w_id, x_id) = (inputs[0], inputs[1]);
                    let mut dw = vec![S::zero(); rows * cols];
                    let mut dx = vec![S::zero(); cols];
                    {
                        let wv = &self.nodes[w_id].value;
                        let xv = &self.nodes[x_id].value;
                        for i in 0..rows {
                            let a = adj[i];
                            for j in 0..cols {
                                dw[i * cols + j] = dw[i * cols + j] + a * xv[j];
                                dx[j] = dx[j] + wv[i * cols + j] * a;
                            }
                        }
                    }
                    bump(&mut adjoints, w_id, &dw);
                    bump(&mut adjoints, x_id, &dx);
                }
                Op::Add => {
                    bump(&mut adjoints, inputs[0], &adj);
                    bump(&mut adjoints, inputs[1], &adj);
                }
                Op::Sub => {
                    bump(&mut adjoints, inputs[0], &adj);
                    let neg: Vec<S> = adj.iter().map(|&a| -a).collect();
                    bump(&mut adjoints, inputs[1], &neg);
                }
                Op::Dot => {
                    let a0 = adj[0];
                    let da: Vec<S> =
                        self.nodes[inputs[1]].value.iter().map(|&v| a0 * v).collect();
                    let db: Vec<S> =
                        self.nodes[inputs[0]].value.iter().map(|&v| a0 * v).collect();
                    bump(&mut adjoints, inputs[0], &da);
                    bump(&mut adjoints, inputs[1], &db);
                }
                Op::Scale(c) => {
                    let cs = S::from_f64(c);
                    let d: Vec<S> = adj.iter().map(|&a| a * cs).collect();
                    bump(&mut adjoints, inputs[0], &d);
                }
                Op::Act(act) => {
                    let d: Vec<S> = self.nodes[inputs[0]]
                        .value
                        .iter()
                        .zip(&adj)
                        .map(|(&x, &a)| a * act.deriv(x))
                        .collect();
                    bump(&mut adjoints, inputs[0], &d);
                }
                Op::Concat => {
                    let mut off = 0;
                    for &p in &inputs {
                        let l = self.nodes[p].value.len();
                        let part = adj[off..off + l].to_vec();
                        bump(&mut adjoints, p, &part);
                        off += l;
                    }
                }
                Op::Slice { start, len } => {
                    let full = self.nodes[inputs[0]].value.len();
                    let mut d = vec![S::zero(); full];
                    d[start..start + len].copy_from_slice(&adj);
                    bump(&mut adjoints, inputs[0], &d);
                }
                Op::StopGradient => {}
            }
            adjoints[id] = Some(adj);
        }
        Ok(BackwardResult { adjoints, param_grads })
    }
}

/// Forward pass of a network, returning the output and a replayable tape with
/// one parameter space (the network's own).
pub fn eval(net: &Network, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let mut tape = Tape::new(vec![net.param_len]);
    let x_node = tape.input(x.to_vec());
    tape.input_node = Some(x_node);
    let out = tape.network(net, params, 0, x_node)?;
    tape.output_node = Some(out);
    let y = tape.value(out).to_vec();
    Ok((y, tape))
}

pub struct VjpResult {
    pub input_grad: Vec<f64>,
    pub param_grad: Vec<f64>,
}

/// cotangentᵀ·J pulled back through a recorded forward pass.
pub fn vjp(tape: &mut Tape, cotangent: &[f64]) -> Result<VjpResult> {
    let out = tape.output_node.expect("tape has no recorded output");
    let inp = tape.input_node.expect("tape has no recorded input");
    let res = tape.backward(out, cotangent)?;
    let input_grad = res
        .adjoint(inp)
        .map(|a| a.to_vec())
        .unwrap_or_else(|| vec![0.0; tape.value(inp).len()]);
    Ok(VjpResult { input_grad, param_grad: res.param_grads.into_iter().next().unwrap() })
}

/// Forward-mode product: returns (net(x), J·tangent).
pub fn jvp(net: &Network, params: &[f64], x: &[f64], tangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != tangent.len() {
        return Err(AutodiffError::DimensionMismatch { expected: x.len(), got: tangent.len() });
    }
    let mut tape: Tape<Dual> = Tape::new(vec![net.param_len]);
    let x_node = tape.input(
        x.iter().zip(tangent).map(|(&v, &t)| Dual::new(v, t)).collect(),
    );
    let out = tape.network(net, params, 0, x_node)?;
    let y = tape.value(out);
    Ok((
        y.iter().map(|d| d.re).collect(),
        y.iter().map(|d| d.du).collect(),
    ))
}

/// Full input Jacobian assembled from `input_dim` forward-mode products.
pub fn full_jacobian(net: &Network, params: &[f64], x: &[f64]) -> Result<Matrix> {
    let n = net.input_dim;
    let mut jac = Matrix::zeros(net.output_dim, n);
    let mut tangent = vec![0.0; n];
    for j in 0..n {
        tangent[j] = 1.0;
        let (_, col) = jvp(net, params, x, &tangent)?;
        tangent[j] = 0.0;
        for i in 0..net.output_dim {
            jac[(i, j)] = col[i];
        }
    }
    Ok(jac)
}

/// value = cotangentᵀ · J(point) · tangent together with its gradient with
/// respect to the network parameters, computed forward-over-reverse: one
/// dual-valued forward pass (tangent seeded at the input) and one dual-valued
/// reverse pass (cotangent seed). The tangent part of the parameter cotangent
/// is exactly ∂/∂params [cᵀ J t].
pub fn bilinear_jacobian_grad(
    net: &Network,
    params: &[f64],
    point: &[f64],
    tangent: &[f64],
    cotangent: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let full = bilinear_jacobian_full(net, params, point, tangent, cotangent)?;
    Ok((full.value, full.param_grad))
}

pub struct BilinearResult {
    /// cotangentᵀ · J(point) · tangent
    pub value: f64,
    /// ∂value/∂params
    pub param_grad: Vec<f64>,
    /// ∂value/∂point — a Hessian-vector contraction, read off the tangent part
    /// of the input adjoint
    pub point_grad: Vec<f64>,
}

pub fn bilinear_jacobian_full(
    net: &Network,
    params: &[f64],
    point: &[f64],
    tangent: &[f64],
    cotangent: &[f64],
) -> Result<BilinearResult> {
    let mut tape: Tape<Dual> = Tape::new(vec![net.param_len]);
    let x_node = tape.input(
        point.iter().zip(tangent).map(|(&v, &t)| Dual::new(v, t)).collect(),
    );
    let out = tape.network(net, params, 0, x_node)?;
    let y = tape.value(out).to_vec();
    let value: f64 = y.iter().zip(cotangent).map(|(d, &c)| c * d.du).sum();
    let seed: Vec<Dual> = cotangent.iter().map(|&c| Dual::constant(c)).collect();
    let res = tape.backward(out, &seed)?;
    let param_grad = res.param_grads[0].iter().map(|d| d.du).collect();
    let point_grad = res
        .adjoint(x_node)
        .map(|a| a.iter().map(|d| d.du).collect())
        .unwrap_or_else(|| vec![0.0; point.len()]);
    Ok(BilinearResult { value, param_grad, point_grad })
}

/// Central-difference gradient of a scalar function of a flat parameter vector.
pub fn finite_diff_grad<F>(mut scalar_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = scalar_fn(&p);
        p[i] = orig - h;
        let fm = scalar_fn(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AutodiffError::NonFinite("finite_diff_grad"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

pub const FD_STEP: f64 = 1e-5;
