//! Reverse-mode differentiation over the tensor kernels.
//!
//! Model code is written once against the [`Graph`] trait and runs either
//! eagerly ([`Eager`], plain tensors, used for inference) or on a [`Tape`]
//! that records every operation for a backward pass. [`grad_check`] compares
//! tape gradients with central finite differences evaluated on an eager graph
//! that replays the tape's stop-gradient values, which is exactly the
//! function whose gradient the tape computes.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{self, BoolMatrix, LayerNormCache, Precision, Tensor};

/// Operations available to model code.
pub trait Graph {
    type V: Clone;

    /// A differentiable input (parameter).
    fn leaf(&mut self, t: Tensor) -> Self::V;
    /// A value that never receives gradient.
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, a: &Self::V) -> Self::V;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V, eps: f64) -> Result<Self::V>;
    fn masked_softmax(&mut self, logits: &Self::V, mask: &BoolMatrix) -> Result<Self::V>;
    fn slice_cols(&mut self, a: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn gather_rows(&mut self, a: &Self::V, idx: &[usize]) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    /// Forward identity, zero backward contribution.
    fn stop_gradient(&mut self, a: &Self::V) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean_rows(&mut self, a: &Self::V) -> Self::V;
    fn cross_entropy(&mut self, logits: &Self::V, targets: &[usize]) -> Result<Self::V>;

    fn sum_squares(&mut self, a: &Self::V) -> Result<Self::V> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(&sq))
    }

    /// Forward value `target`, backward identity to `x`:
    /// `x + sg(target - x)`.
    fn straight_through(&mut self, x: &Self::V, target: &Tensor) -> Result<Self::V> {
        let delta = tensor::sub(target, self.value(x))?;
        let delta = self.constant(delta);
        let delta = self.stop_gradient(&delta);
        self.add(x, &delta)
    }
}

// ---------------------------------------------------------------------------
// Eager evaluation
// ---------------------------------------------------------------------------

/// Evaluates operations immediately on owned tensors.
#[derive(Debug, Default)]
pub struct Eager {
    replay: Option<VecDeque<Tensor>>,
}

impl Eager {
    pub fn new() -> Self {
        Eager::default()
    }

    /// An evaluator whose `stop_gradient` calls return, in order, the values
    /// recorded by a tape rather than their inputs.
    pub fn replaying(stopped: Vec<Tensor>) -> Self {
        Eager {
            replay: Some(stopped.into()),
        }
    }
}

impl Graph for Eager {
    type V = Tensor;

    fn leaf(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }
    fn transpose(&mut self, a: &Tensor) -> Tensor {
        tensor::transpose(a)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mul(a, b)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        tensor::scale(a, s)
    }
    fn add_row(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        tensor::add_row(a, bias)
    }
    fn gelu(&mut self, a: &Tensor) -> Tensor {
        tensor::gelu(a)
    }
    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        tensor::layer_norm(x, gain, bias, eps).map(|(y, _)| y)
    }
    fn masked_softmax(&mut self, logits: &Tensor, mask: &BoolMatrix) -> Result<Tensor> {
        tensor::masked_softmax(logits, mask)
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        tensor::slice_cols(a, start, end)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn gather_rows(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        tensor::gather_rows(a, idx)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn stop_gradient(&mut self, a: &Tensor) -> Tensor {
        match &mut self.replay {
            Some(queue) => queue
                .pop_front()
                .expect("replayed computation issued more stop_gradient calls than recorded"),
            None => a.clone(),
        }
    }
    fn sum(&mut self, a: &Tensor) -> Tensor {
        tensor::sum(a)
    }
    fn mean_rows(&mut self, a: &Tensor) -> Tensor {
        tensor::mean_rows(a)
    }
    fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        tensor::cross_entropy(logits, targets).map(|(l, _)| l)
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    MaskedSoftmax(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    StopGradient,
    Sum(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; parents always precede children.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stopped: Vec<Tensor>,
}

/// Gradients of a scalar with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone(), Precision::F64)
                .expect("gradient matches node shape"),
            None => Tensor::zeros(shape, Precision::F64),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Values seen by every `stop_gradient` call, in call order.
    pub fn stopped_values(&self) -> &[Tensor] {
        &self.stopped
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant | Op::StopGradient => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar node. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[id] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let out_dims = node.value.dims();
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims();
                let n = out_dims.1;
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                if self.nodes[a.0].needs_grad {
                    // da = dy · bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // db = aᵀ · dy
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += a_ip * dy[i * n + j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = out_dims;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = dy[i * c + j];
                    }
                }
                acc(*a, da);
            }
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                acc(*a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, dy.iter().map(|g| g * s).collect()),
            Op::AddRow(a, bias) => {
                acc(*a, dy.to_vec());
                let (r, c) = out_dims;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += dy[i * c + j];
                    }
                }
                acc(*bias, db);
            }
            Op::Gelu(a) => {
                let av = self.val(*a).data();
                acc(
                    *a,
                    dy.iter()
                        .zip(av)
                        .map(|(g, &x)| g * tensor::gelu_grad_scalar(x))
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (t, d) = out_dims;
                let g = self.val(*gain).data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; t * d];
                for i in 0..t {
                    let nrow = &cache.normalized[i * d..(i + 1) * d];
                    let dyrow = &dy[i * d..(i + 1) * d];
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    for j in 0..d {
                        dgain[j] += dyrow[j] * nrow[j];
                        dbias[j] += dyrow[j];
                        let dn = dyrow[j] * g[j];
                        mean_dn += dn;
                        mean_dn_n += dn * nrow[j];
                    }
                    mean_dn /= d as f64;
                    mean_dn_n /= d as f64;
                    let rs = cache.inv_std[i];
                    for j in 0..d {
                        let dn = dyrow[j] * g[j];
                        dx[i * d + j] = rs * (dn - mean_dn - nrow[j] * mean_dn_n);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::MaskedSoftmax(a) => {
                let (r, c) = out_dims;
                let y = node.value.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| dy[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        da[i * c + j] = y[i * c + j] * (dy[i * c + j] - dot);
                    }
                }
                acc(*a, da);
            }
            Op::SliceCols { src, start } => {
                let (r, w) = out_dims;
                let c = self.val(*src).cols();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                acc(*src, da);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out_dims;
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&dy[i * total + offset..i * total + offset + w]);
                    }
                    acc(*p, dp);
                    offset += w;
                }
            }
            Op::GatherRows { src, idx } => {
                let c = out_dims.1;
                let mut da = vec![0.0; self.val(*src).len()];
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[row * c + j] += dy[k * c + j];
                    }
                }
                acc(*src, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.val(*p).len();
                    acc(*p, dy[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Sum(a) => acc(*a, vec![dy[0]; self.val(*a).len()]),
            Op::MeanRows(a) => {
                let (r, c) = self.val(*a).dims();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = dy[j] / r as f64;
                    }
                }
                acc(*a, da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.val(*logits).dims();
                let mut da: Vec<f64> = probs.iter().map(|p| p * dy[0] / r as f64).collect();
                for (i, &t) in targets.iter().enumerate() {
                    da[i * c + t] -= dy[0] / r as f64;
                }
                acc(*logits, da);
            }
        }
    }
}

impl Graph for Tape {
    type V = Var;

    fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }
    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::MatMul(*a, *b), &[*a, *b]))
    }
    fn transpose(&mut self, a: &Var) -> Var {
        let y = tensor::transpose(self.val(*a));
        self.push(y, Op::Transpose(*a), &[*a])
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::add(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Add(*a, *b), &[*a, *b]))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::sub(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Sub(*a, *b), &[*a, *b]))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b), &[*a, *b]))
    }
    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let y = tensor::scale(self.val(*a), s);
        self.push(y, Op::Scale(*a, s), &[*a])
    }
    fn add_row(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        let y = tensor::add_row(self.val(*a), self.val(*bias))?;
        Ok(self.push(y, Op::AddRow(*a, *bias), &[*a, *bias]))
    }
    fn gelu(&mut self, a: &Var) -> Var {
        let y = tensor::gelu(self.val(*a));
        self.push(y, Op::Gelu(*a), &[*a])
    }
    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (y, cache) = tensor::layer_norm(self.val(*x), self.val(*gain), self.val(*bias), eps)?;
        let op = Op::LayerNorm {
            x: *x,
            gain: *gain,
            bias: *bias,
            cache,
        };
        Ok(self.push(y, op, &[*x, *gain, *bias]))
    }
    fn masked_softmax(&mut self, logits: &Var, mask: &BoolMatrix) -> Result<Var> {
        let y = tensor::masked_softmax(self.val(*logits), mask)?;
        Ok(self.push(y, Op::MaskedSoftmax(*logits), &[*logits]))
    }
    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let y = tensor::slice_cols(self.val(*a), start, end)?;
        Ok(self.push(y, Op::SliceCols { src: *a, start }, &[*a]))
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let y = tensor::concat_cols(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), parts))
    }
    fn gather_rows(&mut self, a: &Var, idx: &[usize]) -> Result<Var> {
        let y = tensor::gather_rows(self.val(*a), idx)?;
        let op = Op::GatherRows {
            src: *a,
            idx: idx.to_vec(),
        };
        Ok(self.push(y, op, &[*a]))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let y = tensor::concat_rows(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), parts))
    }
    fn stop_gradient(&mut self, a: &Var) -> Var {
        let y = self.val(*a).clone();
        self.stopped.push(y.clone());
        self.push(y, Op::StopGradient, &[*a])
    }
    fn sum(&mut self, a: &Var) -> Var {
        let y = tensor::sum(self.val(*a));
        self.push(y, Op::Sum(*a), &[*a])
    }
    fn mean_rows(&mut self, a: &Var) -> Var {
        let y = tensor::mean_rows(self.val(*a));
        self.push(y, Op::MeanRows(*a), &[*a])
    }
    fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let (y, probs) = tensor::cross_entropy(self.val(*logits), targets)?;
        let op = Op::CrossEntropy {
            logits: *logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(y, op, &[*logits]))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// A scalar-valued computation over a list of parameter tensors.
pub trait ScalarFn {
    fn eval<G: Graph>(&self, g: &mut G, params: &[G::V]) -> Result<G::V>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// Finite differences are taken with every stop-gradient output frozen at its
/// recorded value.
pub fn grad_check<F: ScalarFn>(f: &F, params: &[Tensor], h: f64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Precondition(format!("step {h} outside [1e-6, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    if tape.value(&out).len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let grads = tape.backward(out)?;
    let stopped = tape.stopped_values().to_vec();

    let eval_at = |p: &[Tensor]| -> Result<f64> {
        let mut g = Eager::replaying(stopped.clone());
        let vs: Vec<Tensor> = p.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(f.eval(&mut g, &vs)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..params[pi].len() {
            let base = params[pi].data()[e];
            let shape = params[pi].shape().to_vec();
            let precision = params[pi].precision();
            let set = |w: &mut Vec<Tensor>, v: f64| {
                let mut d = params[pi].data().to_vec();
                d[e] = v;
                w[pi] = Tensor::new(shape.clone(), d, precision).expect("same shape");
            };
            set(&mut work, base + h);
            let plus = eval_at(&work)?;
            set(&mut work, base - h);
            let minus = eval_at(&work)?;
            set(&mut work, base);
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[e], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
