//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The design is a per-step tape: [`Tape`] owns every node produced
//! during one forward pass, [`Tensor`] is a copyable handle into it.
//! Learnable parameters live outside the tape as [`TensorData`] and are
//! re-leafed for each training step; after [`Tape::backward`] their
//! gradients are read back out by handle.
//!
//! Conventions: convolution is cross-correlation (no kernel flip), GELU
//! is the tanh approximation, dropout is inverted (scaled at train
//! time). Every differentiable op's backward is pinned against central
//! finite differences in the test suite — see [`gradcheck`].

pub mod checkpoint;
pub mod gradcheck;
mod kernels;

use kernels::{
    aligned_strides, broadcast_shape, for_each_broadcast, mm_nn_acc, mm_nt_acc, mm_tn_acc,
    strides_for,
};
use rand::Rng;
use std::cell::RefCell;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} wants {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shapes {0:?} and {1:?} do not broadcast")]
    BroadcastMismatch(Vec<usize>, Vec<usize>),
    #[error("matmul inner dimensions disagree: {0:?} × {1:?}")]
    MatmulMismatch(Vec<usize>, Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("expected rank {expected}, got shape {got:?}")]
    RankMismatch { expected: usize, got: Vec<usize> },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("kernel span {span} exceeds padded input length {padded}")]
    KernelTooLong { span: usize, padded: usize },
    #[error("batch norm in train mode needs more than one element per channel")]
    SingleElementBatch,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("narrow [{start}, {start}+{len}) out of range for dim {dim}")]
    NarrowOutOfRange { start: usize, len: usize, dim: usize },
    #[error("invalid permutation {0:?}")]
    BadPermutation(Vec<usize>),
    #[error("cannot reshape {from:?} ({from_n} values) to {to:?} ({to_n} values)")]
    ReshapeMismatch {
        from: Vec<usize>,
        from_n: usize,
        to: Vec<usize>,
        to_n: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dropout rate must be in [0, 1), got {0}")]
    BadDropoutRate(f64),
}

/// Plain dense array: a shape plus row-major values. This is how
/// parameters are stored between steps and how checkpoints are written.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian init, `N(mean, std²)`.
    pub fn randn<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        // Box-Muller; avoids pulling a distributions crate for one sampler.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(mean + std * r * theta.cos());
            if data.len() < n {
                data.push(mean + std * r * theta.sin());
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Relu,
    Gelu,
    Silu,
    Softplus,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Unary { x: usize, kind: UnaryKind },
    Matmul { a: usize, b: usize },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        dilation: usize,
        pad_left: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        istd: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        istd: Vec<f64>,
    },
    Softmax { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    SumAxis { x: usize, axis: usize },
    SumAll { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    BroadcastTo { x: usize },
    Dropout { x: usize, mask: Vec<f64> },
    SelectiveScan {
        x: usize,
        delta: usize,
        b_seq: usize,
        c_seq: usize,
        a_diag: usize,
        h_all: Vec<f64>,
        abar: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        weight_sum: f64,
    },
}

struct Node {
    value: TensorData,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of one forward pass. Inputs of every node precede it,
/// so a single reverse sweep visits each node exactly once.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle into a [`Tape`]; cheap to copy, valid for the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: TensorData, requires_grad: bool, op: Op) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Introduces an input tensor. Gradients are produced for it only
    /// when `requires_grad` is set.
    pub fn leaf(&self, value: TensorData, requires_grad: bool) -> Tensor<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: TensorData) -> Tensor<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.constant(TensorData::scalar(value))
    }

    /// Reverse sweep from a scalar loss: populates `grad` on every
    /// gradient-requiring node reachable from it.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<(), TensorError> {
        assert!(std::ptr::eq(loss.tape, self), "tensor from another tape");
        let mut nodes = self.nodes.borrow_mut();
        {
            let loss_node = &mut nodes[loss.idx];
            if loss_node.value.numel() != 1 {
                return Err(TensorError::NotScalar(loss_node.value.shape.clone()));
            }
            loss_node.grad = Some(vec![1.0]);
        }
        for idx in (0..=loss.idx).rev() {
            let (head, tail) = nodes.split_at_mut(idx);
            let node = &mut tail[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let grad = node.grad.as_ref().unwrap();
            backward_step(head, &node.value, grad, &node.op);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], idx: usize, contribution: &[f64]) {
    if !nodes[idx].requires_grad {
        return;
    }
    let n = nodes[idx].value.numel();
    let grad = nodes[idx].grad.get_or_insert_with(|| vec![0.0; n]);
    for (g, c) in grad.iter_mut().zip(contribution) {
        *g += c;
    }
}

fn requires(nodes: &[Node], idx: usize) -> bool {
    nodes[idx].requires_grad
}

/// Routes one node's upstream gradient to its inputs.
fn backward_step(head: &mut [Node], out_value: &TensorData, g: &[f64], op: &Op) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            for (slot, factor) in [(*a, 1.0), (*b, sign)] {
                if !requires(head, slot) {
                    continue;
                }
                let in_shape = head[slot].value.shape.clone();
                let mut contrib = vec![0.0; head[slot].value.numel()];
                let strides = aligned_strides(&in_shape, &out_value.shape);
                let zero = vec![0usize; out_value.shape.len()];
                for_each_broadcast(&out_value.shape, &strides, &zero, |flat, off, _| {
                    contrib[off] += factor * g[flat];
                });
                accumulate(head, slot, &contrib);
            }
        }
        Op::Mul { a, b } => {
            let out_shape = out_value.shape.clone();
            for (slot, other) in [(*a, *b), (*b, *a)] {
                if !requires(head, slot) {
                    continue;
                }
                let s_str = aligned_strides(&head[slot].value.shape, &out_shape);
                let o_str = aligned_strides(&head[other].value.shape, &out_shape);
                let mut contrib = vec![0.0; head[slot].value.numel()];
                {
                    let other_data = &head[other].value.data;
                    for_each_broadcast(&out_shape, &s_str, &o_str, |flat, s_off, o_off| {
                        contrib[s_off] += g[flat] * other_data[o_off];
                    });
                }
                accumulate(head, slot, &contrib);
            }
        }
        Op::Scale { x, factor } => {
            if requires(head, *x) {
                let contrib: Vec<f64> = g.iter().map(|v| v * factor).collect();
                accumulate(head, *x, &contrib);
            }
        }
        Op::Unary { x, kind } => {
            if !requires(head, *x) {
                return;
            }
            let input = &head[*x].value.data;
            let output = &out_value.data;
            let contrib: Vec<f64> = match kind {
                UnaryKind::Exp => g.iter().zip(output).map(|(gv, y)| gv * y).collect(),
                UnaryKind::Relu => g
                    .iter()
                    .zip(input)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect(),
                UnaryKind::Gelu => g
                    .iter()
                    .zip(input)
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect(),
                UnaryKind::Silu => g
                    .iter()
                    .zip(input)
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect(),
                UnaryKind::Softplus => g
                    .iter()
                    .zip(input)
                    .map(|(gv, &x)| gv * sigmoid(x))
                    .collect(),
            };
            accumulate(head, *x, &contrib);
        }
        Op::Matmul { a, b } => {
            let (a_shape, b_shape) = (head[*a].value.shape.clone(), head[*b].value.shape.clone());
            let ra = a_shape.len();
            let rb = b_shape.len();
            let m = a_shape[ra - 2];
            let kk = a_shape[ra - 1];
            let n = b_shape[rb - 1];
            let batch: usize = a_shape[..ra - 2].iter().product();
            let b_batched = rb > 2;
            if requires(head, *a) {
                let mut contrib = vec![0.0; head[*a].value.numel()];
                let b_data = &head[*b].value.data;
                for t in 0..batch {
                    let g_blk = &g[t * m * n..(t + 1) * m * n];
                    let b_blk = if b_batched {
                        &b_data[t * kk * n..(t + 1) * kk * n]
                    } else {
                        &b_data[..]
                    };
                    mm_nt_acc(g_blk, b_blk, &mut contrib[t * m * kk..(t + 1) * m * kk], m, n, kk);
                }
                accumulate(head, *a, &contrib);
            }
            if requires(head, *b) {
                let mut contrib = vec![0.0; head[*b].value.numel()];
                let a_data = &head[*a].value.data;
                for t in 0..batch {
                    let g_blk = &g[t * m * n..(t + 1) * m * n];
                    let a_blk = &a_data[t * m * kk..(t + 1) * m * kk];
                    let c_blk = if b_batched {
                        &mut contrib[t * kk * n..(t + 1) * kk * n]
                    } else {
                        &mut contrib[..]
                    };
                    mm_tn_acc(a_blk, g_blk, c_blk, m, kk, n);
                }
                accumulate(head, *b, &contrib);
            }
        }
        Op::Conv1d {
            x,
            w,
            bias,
            stride,
            dilation,
            pad_left,
            ..
        } => {
            let x_shape = head[*x].value.shape.clone();
            let w_shape = head[*w].value.shape.clone();
            let (batch, c_in, t_in) = (x_shape[0], x_shape[1], x_shape[2]);
            let (c_out, _, ksize) = (w_shape[0], w_shape[1], w_shape[2]);
            let t_out = out_value.shape[2];
            let (s, d, pl) = (*stride, *dilation, *pad_left);

            if requires(head, *x) {
                let mut contrib = vec![0.0; head[*x].value.numel()];
                let w_data = &head[*w].value.data;
                for bi in 0..batch {
                    for co in 0..c_out {
                        let g_row = &g[(bi * c_out + co) * t_out..(bi * c_out + co + 1) * t_out];
                        for ci in 0..c_in {
                            let dx_row =
                                &mut contrib[(bi * c_in + ci) * t_in..(bi * c_in + ci + 1) * t_in];
                            for j in 0..ksize {
                                let wv = w_data[(co * c_in + ci) * ksize + j];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (t0, t1) = conv_range(t_in, t_out, s, d, pl, j);
                                for tp in t0..t1 {
                                    dx_row[tp * s + j * d - pl] += wv * g_row[tp];
                                }
                            }
                        }
                    }
                }
                accumulate(head, *x, &contrib);
            }
            if requires(head, *w) {
                let mut contrib = vec![0.0; head[*w].value.numel()];
                let x_data = &head[*x].value.data;
                for bi in 0..batch {
                    for co in 0..c_out {
                        let g_row = &g[(bi * c_out + co) * t_out..(bi * c_out + co + 1) * t_out];
                        for ci in 0..c_in {
                            let x_row =
                                &x_data[(bi * c_in + ci) * t_in..(bi * c_in + ci + 1) * t_in];
                            for j in 0..ksize {
                                let (t0, t1) = conv_range(t_in, t_out, s, d, pl, j);
                                let mut acc = 0.0;
                                for tp in t0..t1 {
                                    acc += g_row[tp] * x_row[tp * s + j * d - pl];
                                }
                                contrib[(co * c_in + ci) * ksize + j] += acc;
                            }
                        }
                    }
                }
                accumulate(head, *w, &contrib);
            }
            if let Some(bidx) = bias {
                if requires(head, *bidx) {
                    let mut contrib = vec![0.0; c_out];
                    for bi in 0..batch {
                        for co in 0..c_out {
                            let g_row =
                                &g[(bi * c_out + co) * t_out..(bi * c_out + co + 1) * t_out];
                            contrib[co] += g_row.iter().sum::<f64>();
                        }
                    }
                    accumulate(head, *bidx, &contrib);
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            istd,
            train,
        } => {
            let x_shape = head[*x].value.shape.clone();
            let (batch, ch, t_len) = (x_shape[0], x_shape[1], x_shape[2]);
            let n = (batch * t_len) as f64;
            let x_data = &head[*x].value.data;
            let gamma_data = &head[*gamma].value.data;

            // per-channel reductions Σg and Σg·x̂
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for bi in 0..batch {
                for c in 0..ch {
                    for t in 0..t_len {
                        let i = (bi * ch + c) * t_len + t;
                        let xhat = (x_data[i] - mean[c]) * istd[c];
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat;
                    }
                }
            }
            if requires(head, *x) {
                let mut contrib = vec![0.0; head[*x].value.numel()];
                for bi in 0..batch {
                    for c in 0..ch {
                        let gi = gamma_data[c] * istd[c];
                        for t in 0..t_len {
                            let i = (bi * ch + c) * t_len + t;
                            contrib[i] = if *train {
                                let xhat = (x_data[i] - mean[c]) * istd[c];
                                gi * (g[i] - sum_g[c] / n - xhat * sum_gx[c] / n)
                            } else {
                                gi * g[i]
                            };
                        }
                    }
                }
                accumulate(head, *x, &contrib);
            }
            accumulate(head, *gamma, &sum_gx);
            accumulate(head, *beta, &sum_g);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            istd,
        } => {
            let x_shape = head[*x].value.shape.clone();
            let dim = *x_shape.last().unwrap();
            let rows = head[*x].value.numel() / dim;
            let x_data = &head[*x].value.data;
            let gamma_data = &head[*gamma].value.data;

            let mut d_gamma = vec![0.0; dim];
            let mut d_beta = vec![0.0; dim];
            let mut d_x = vec![0.0; head[*x].value.numel()];
            for r in 0..rows {
                let base = r * dim;
                let mut sum_dg = 0.0;
                let mut sum_dgx = 0.0;
                for j in 0..dim {
                    let xhat = (x_data[base + j] - mean[r]) * istd[r];
                    let dy = g[base + j];
                    d_gamma[j] += dy * xhat;
                    d_beta[j] += dy;
                    let dyg = dy * gamma_data[j];
                    sum_dg += dyg;
                    sum_dgx += dyg * xhat;
                }
                let inv_dim = 1.0 / dim as f64;
                for j in 0..dim {
                    let xhat = (x_data[base + j] - mean[r]) * istd[r];
                    let dyg = g[base + j] * gamma_data[j];
                    d_x[base + j] = istd[r] * (dyg - inv_dim * sum_dg - xhat * inv_dim * sum_dgx);
                }
            }
            accumulate(head, *x, &d_x);
            accumulate(head, *gamma, &d_gamma);
            accumulate(head, *beta, &d_beta);
        }
        Op::Softmax { x, axis } => {
            if !requires(head, *x) {
                return;
            }
            let shape = out_value.shape.clone();
            let y = &out_value.data;
            let axis_len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let mut contrib = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let mut dot = 0.0;
                    for a in 0..axis_len {
                        let idx = base + a * inner;
                        dot += g[idx] * y[idx];
                    }
                    for a in 0..axis_len {
                        let idx = base + a * inner;
                        contrib[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            accumulate(head, *x, &contrib);
        }
        Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
            if !requires(head, *x) {
                return;
            }
            let in_shape = head[*x].value.shape.clone();
            let axis_len = in_shape[*axis];
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let outer: usize = in_shape[..*axis].iter().product();
            let factor = if matches!(op, Op::MeanAxis { .. }) {
                1.0 / axis_len as f64
            } else {
                1.0
            };
            let mut contrib = vec![0.0; head[*x].value.numel()];
            for o in 0..outer {
                for a in 0..axis_len {
                    for i in 0..inner {
                        contrib[(o * axis_len + a) * inner + i] = g[o * inner + i] * factor;
                    }
                }
            }
            accumulate(head, *x, &contrib);
        }
        Op::SumAll { x } => {
            if requires(head, *x) {
                let contrib = vec![g[0]; head[*x].value.numel()];
                accumulate(head, *x, &contrib);
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = out_value.shape.clone();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let total_axis = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = head[inp].value.shape[*axis];
                if requires(head, inp) {
                    let mut contrib = vec![0.0; head[inp].value.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * len * inner;
                        contrib[dst..dst + len * inner]
                            .copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(head, inp, &contrib);
                }
                offset += len;
            }
        }
        Op::Narrow {
            x,
            axis,
            start,
            len,
        } => {
            if !requires(head, *x) {
                return;
            }
            let in_shape = head[*x].value.shape.clone();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let outer: usize = in_shape[..*axis].iter().product();
            let full = in_shape[*axis];
            let mut contrib = vec![0.0; head[*x].value.numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                contrib[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(head, *x, &contrib);
        }
        Op::Permute { x, perm } => {
            if !requires(head, *x) {
                return;
            }
            // out dim i came from in dim perm[i]; route grads back
            let in_shape = head[*x].value.shape.clone();
            let in_strides = strides_for(&in_shape);
            let out_shape = out_value.shape.clone();
            let mut gather: Vec<usize> = vec![0; out_shape.len()];
            for (i, &p) in perm.iter().enumerate() {
                gather[i] = in_strides[p];
            }
            let mut contrib = vec![0.0; head[*x].value.numel()];
            let zero = vec![0usize; out_shape.len()];
            for_each_broadcast(&out_shape, &gather, &zero, |flat, in_off, _| {
                contrib[in_off] = g[flat];
            });
            accumulate(head, *x, &contrib);
        }
        Op::Reshape { x } => {
            accumulate(head, *x, g);
        }
        Op::BroadcastTo { x } => {
            if !requires(head, *x) {
                return;
            }
            let in_shape = head[*x].value.shape.clone();
            let strides = aligned_strides(&in_shape, &out_value.shape);
            let zero = vec![0usize; out_value.shape.len()];
            let mut contrib = vec![0.0; head[*x].value.numel()];
            for_each_broadcast(&out_value.shape, &strides, &zero, |flat, off, _| {
                contrib[off] += g[flat];
            });
            accumulate(head, *x, &contrib);
        }
        Op::Dropout { x, mask } => {
            if requires(head, *x) {
                let contrib: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                accumulate(head, *x, &contrib);
            }
        }
        Op::SelectiveScan {
            x,
            delta,
            b_seq,
            c_seq,
            a_diag,
            h_all,
            abar,
        } => {
            let x_shape = head[*x].value.shape.clone();
            let (batch, t_len, ch) = (x_shape[0], x_shape[1], x_shape[2]);
            let s_dim = head[*b_seq].value.shape[2];
            let x_data = &head[*x].value.data;
            let d_data = &head[*delta].value.data;
            let b_data = &head[*b_seq].value.data;
            let c_data = &head[*c_seq].value.data;
            let a_data = &head[*a_diag].value.data;

            let mut d_x = vec![0.0; x_data.len()];
            let mut d_delta = vec![0.0; d_data.len()];
            let mut d_b = vec![0.0; b_data.len()];
            let mut d_c = vec![0.0; c_data.len()];
            let mut d_a = vec![0.0; a_data.len()];

            let step = ch * s_dim;
            for bi in 0..batch {
                let mut lam = vec![0.0; step];
                for t in (0..t_len).rev() {
                    let h_t = &h_all[(bi * t_len + t) * step..(bi * t_len + t + 1) * step];
                    let ab_t = &abar[(bi * t_len + t) * step..(bi * t_len + t + 1) * step];
                    let h_prev: Option<&[f64]> = if t > 0 {
                        Some(&h_all[(bi * t_len + t - 1) * step..(bi * t_len + t) * step])
                    } else {
                        None
                    };
                    let bc_base = (bi * t_len + t) * s_dim;
                    let xc_base = (bi * t_len + t) * ch;
                    for c in 0..ch {
                        let gy = g[xc_base + c];
                        // y_t = Σ_s C[t,s]·h_t[c,s]
                        for s in 0..s_dim {
                            d_c[bc_base + s] += gy * h_t[c * s_dim + s];
                            lam[c * s_dim + s] += c_data[bc_base + s] * gy;
                        }
                    }
                    for c in 0..ch {
                        let dt = d_data[xc_base + c];
                        let xv = x_data[xc_base + c];
                        let mut dd = 0.0;
                        let mut dx = 0.0;
                        for s in 0..s_dim {
                            let l = lam[c * s_dim + s];
                            let hp = h_prev.map_or(0.0, |h| h[c * s_dim + s]);
                            let ab = ab_t[c * s_dim + s];
                            let bv = b_data[bc_base + s];
                            dd += l * (hp * a_data[c * s_dim + s] * ab + bv * xv);
                            d_a[c * s_dim + s] += l * hp * dt * ab;
                            d_b[bc_base + s] += l * dt * xv;
                            dx += l * dt * bv;
                            lam[c * s_dim + s] = l * ab;
                        }
                        d_delta[xc_base + c] += dd;
                        d_x[xc_base + c] += dx;
                    }
                }
            }
            accumulate(head, *x, &d_x);
            accumulate(head, *delta, &d_delta);
            accumulate(head, *b_seq, &d_b);
            accumulate(head, *c_seq, &d_c);
            accumulate(head, *a_diag, &d_a);
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            weight_sum,
        } => {
            if !requires(head, *logits) {
                return;
            }
            let classes = head[*logits].value.shape[1];
            let mut contrib = vec![0.0; head[*logits].value.numel()];
            let scale = g[0] / weight_sum;
            for (b, &y) in targets.iter().enumerate() {
                let w = weights[y];
                for j in 0..classes {
                    let p = probs[b * classes + j];
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    contrib[b * classes + j] = scale * w * (p - onehot);
                }
            }
            accumulate(head, *logits, &contrib);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    // max(x,0) + ln(1 + e^{-|x|}), overflow-safe
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn conv_out_len(
    t_in: usize,
    ksize: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
) -> Result<usize, TensorError> {
    let span = dilation * (ksize - 1) + 1;
    let padded = t_in + pad_left + pad_right;
    if span > padded {
        return Err(TensorError::KernelTooLong { span, padded });
    }
    Ok((padded - span) / stride + 1)
}

/// Valid output range `[t0, t1)` for kernel tap `j` (input index stays in
/// bounds: `0 ≤ t'·s + j·d − pl < t_in`).
fn conv_range(
    t_in: usize,
    t_out: usize,
    s: usize,
    d: usize,
    pl: usize,
    j: usize,
) -> (usize, usize) {
    let jd = j * d;
    let t0 = if jd >= pl { 0 } else { (pl - jd + s - 1) / s };
    let max_excl = t_in + pl;
    let t1 = if jd >= max_excl {
        0
    } else {
        ((max_excl - jd - 1) / s + 1).min(t_out)
    };
    (t0.min(t1), t1)
}

impl<'t> Tensor<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.numel()
    }

    /// Clones the value out of the tape.
    pub fn value(&self) -> TensorData {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Clones the accumulated gradient out of the tape, if any.
    pub fn grad(&self) -> Option<TensorData> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.idx];
        node.grad.as_ref().map(|g| TensorData {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.data[0]
    }

    fn same_tape(&self, other: &Tensor<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "tensors from different tapes");
    }

    fn binary(
        self,
        other: Tensor<'t>,
        make_op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor<'t>, TensorError> {
        self.same_tape(&other);
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let out_shape = broadcast_shape(&a.shape, &b.shape)
                .ok_or_else(|| TensorError::BroadcastMismatch(a.shape.clone(), b.shape.clone()))?;
            let a_str = aligned_strides(&a.shape, &out_shape);
            let b_str = aligned_strides(&b.shape, &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &a_str, &b_str, |flat, ao, bo| {
                data[flat] = f(a.data[ao], b.data[bo]);
            });
            let req = nodes[self.idx].requires_grad || nodes[other.idx].requires_grad;
            (out_shape, data, req)
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            make_op(self.idx, other.idx),
        ))
    }

    pub fn add(self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.binary(other, |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.binary(other, |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.binary(other, |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(self, factor: f64) -> Tensor<'t> {
        let (value, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            (
                TensorData {
                    shape: v.shape.clone(),
                    data: v.data.iter().map(|x| x * factor).collect(),
                },
                nodes[self.idx].requires_grad,
            )
        };
        self.tape.push(
            value,
            req,
            Op::Scale {
                x: self.idx,
                factor,
            },
        )
    }

    pub fn neg(self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    fn unary(self, kind: UnaryKind, f: fn(f64) -> f64) -> Tensor<'t> {
        let (value, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            (
                TensorData {
                    shape: v.shape.clone(),
                    data: v.data.iter().map(|&x| f(x)).collect(),
                },
                nodes[self.idx].requires_grad,
            )
        };
        self.tape.push(value, req, Op::Unary { x: self.idx, kind })
    }

    pub fn exp(self) -> Tensor<'t> {
        self.unary(UnaryKind::Exp, f64::exp)
    }

    pub fn relu(self) -> Tensor<'t> {
        self.unary(UnaryKind::Relu, |x| x.max(0.0))
    }

    pub fn gelu(self) -> Tensor<'t> {
        self.unary(UnaryKind::Gelu, gelu)
    }

    pub fn silu(self) -> Tensor<'t> {
        self.unary(UnaryKind::Silu, |x| x * sigmoid(x))
    }

    pub fn softplus(self) -> Tensor<'t> {
        self.unary(UnaryKind::Softplus, softplus)
    }

    /// Batched matrix product. `self` is `(..., m, k)`; `other` is either
    /// `(k, n)` (shared across the batch) or `(..., k, n)` with matching
    /// leading dims.
    pub fn matmul(self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.same_tape(&other);
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let ra = a.shape.len();
            let rb = b.shape.len();
            if ra < 2 || rb < 2 {
                return Err(TensorError::MatmulMismatch(a.shape.clone(), b.shape.clone()));
            }
            let m = a.shape[ra - 2];
            let kk = a.shape[ra - 1];
            if b.shape[rb - 2] != kk || (rb > 2 && b.shape[..rb - 2] != a.shape[..ra - 2]) {
                return Err(TensorError::MatmulMismatch(a.shape.clone(), b.shape.clone()));
            }
            let n = b.shape[rb - 1];
            let batch: usize = a.shape[..ra - 2].iter().product();
            let mut out_shape = a.shape[..ra - 2].to_vec();
            out_shape.push(m);
            out_shape.push(n);
            let mut data = vec![0.0; batch * m * n];
            for t in 0..batch {
                let a_blk = &a.data[t * m * kk..(t + 1) * m * kk];
                let b_blk = if rb > 2 {
                    &b.data[t * kk * n..(t + 1) * kk * n]
                } else {
                    &b.data[..]
                };
                mm_nn_acc(a_blk, b_blk, &mut data[t * m * n..(t + 1) * m * n], m, kk, n);
            }
            let req = nodes[self.idx].requires_grad || nodes[other.idx].requires_grad;
            (out_shape, data, req)
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::Matmul {
                a: self.idx,
                b: other.idx,
            },
        ))
    }

    /// 1-D cross-correlation over `(batch, channels, time)` input with a
    /// `(c_out, c_in, k)` kernel and zero padding.
    pub fn conv1d(
        self,
        weight: Tensor<'t>,
        bias: Option<Tensor<'t>>,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Tensor<'t>, TensorError> {
        self.same_tape(&weight);
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let w = &nodes[weight.idx].value;
            if x.shape.len() != 3 {
                return Err(TensorError::RankMismatch {
                    expected: 3,
                    got: x.shape.clone(),
                });
            }
            if w.shape.len() != 3 || w.shape[1] != x.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![w.shape[0], x.shape[1], w.shape[2]],
                    got: w.shape.clone(),
                });
            }
            let (batch, c_in, t_in) = (x.shape[0], x.shape[1], x.shape[2]);
            let (c_out, _, ksize) = (w.shape[0], w.shape[1], w.shape[2]);
            let t_out = conv_out_len(t_in, ksize, stride, dilation, pad_left, pad_right)?;
            let bias_data = match &bias {
                Some(b) => {
                    let bv = &nodes[b.idx].value;
                    if bv.shape != [c_out] {
                        return Err(TensorError::ShapeMismatch {
                            expected: vec![c_out],
                            got: bv.shape.clone(),
                        });
                    }
                    Some(bv.data.clone())
                }
                None => None,
            };
            let mut data = vec![0.0; batch * c_out * t_out];
            for bi in 0..batch {
                for co in 0..c_out {
                    let out_row = &mut data[(bi * c_out + co) * t_out..(bi * c_out + co + 1) * t_out];
                    if let Some(bd) = &bias_data {
                        out_row.fill(bd[co]);
                    }
                    for ci in 0..c_in {
                        let x_row = &x.data[(bi * c_in + ci) * t_in..(bi * c_in + ci + 1) * t_in];
                        for j in 0..ksize {
                            let wv = w.data[(co * c_in + ci) * ksize + j];
                            if wv == 0.0 {
                                continue;
                            }
                            let (t0, t1) = conv_range(t_in, t_out, stride, dilation, pad_left, j);
                            for tp in t0..t1 {
                                out_row[tp] += wv * x_row[tp * stride + j * dilation - pad_left];
                            }
                        }
                    }
                }
            }
            let req = nodes[self.idx].requires_grad
                || nodes[weight.idx].requires_grad
                || bias.map_or(false, |b| nodes[b.idx].requires_grad);
            (vec![batch, c_out, t_out], data, req)
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::Conv1d {
                x: self.idx,
                w: weight.idx,
                bias: bias.map(|b| b.idx),
                stride,
                dilation,
                pad_left,
            },
        ))
    }

    /// Train-mode batch norm over `(batch, channels, time)`: normalizes
    /// per channel with biased batch statistics, which are also returned
    /// so the caller can update its running buffers.
    pub fn batchnorm_train(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        eps: f64,
    ) -> Result<(Tensor<'t>, Vec<f64>, Vec<f64>), TensorError> {
        let (out, mean, var) = self.batchnorm_impl(gamma, beta, eps, None)?;
        Ok((out, mean, var))
    }

    /// Eval-mode batch norm using the provided running statistics.
    pub fn batchnorm_eval(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Tensor<'t>, TensorError> {
        let (out, _, _) =
            self.batchnorm_impl(gamma, beta, eps, Some((running_mean, running_var)))?;
        Ok(out)
    }

    fn batchnorm_impl(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Tensor<'t>, Vec<f64>, Vec<f64>), TensorError> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (out_shape, data, mean, var, istd, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.shape.len() != 3 {
                return Err(TensorError::RankMismatch {
                    expected: 3,
                    got: x.shape.clone(),
                });
            }
            let (batch, ch, t_len) = (x.shape[0], x.shape[1], x.shape[2]);
            for t in [&gamma, &beta] {
                let s = &nodes[t.idx].value.shape;
                if *s != vec![ch] {
                    return Err(TensorError::ShapeMismatch {
                        expected: vec![ch],
                        got: s.clone(),
                    });
                }
            }
            let n = batch * t_len;
            let (mean, var) = match running {
                Some((m, v)) => (m.to_vec(), v.to_vec()),
                None => {
                    if n <= 1 {
                        return Err(TensorError::SingleElementBatch);
                    }
                    let mut mean = vec![0.0; ch];
                    let mut var = vec![0.0; ch];
                    for bi in 0..batch {
                        for c in 0..ch {
                            for t in 0..t_len {
                                mean[c] += x.data[(bi * ch + c) * t_len + t];
                            }
                        }
                    }
                    for m in mean.iter_mut() {
                        *m /= n as f64;
                    }
                    for bi in 0..batch {
                        for c in 0..ch {
                            for t in 0..t_len {
                                let d = x.data[(bi * ch + c) * t_len + t] - mean[c];
                                var[c] += d * d;
                            }
                        }
                    }
                    for v in var.iter_mut() {
                        *v /= n as f64;
                    }
                    (mean, var)
                }
            };
            let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let gd = &nodes[gamma.idx].value.data;
            let bd = &nodes[beta.idx].value.data;
            let mut data = vec![0.0; x.data.len()];
            for bi in 0..batch {
                for c in 0..ch {
                    for t in 0..t_len {
                        let i = (bi * ch + c) * t_len + t;
                        data[i] = gd[c] * (x.data[i] - mean[c]) * istd[c] + bd[c];
                    }
                }
            }
            let req = nodes[self.idx].requires_grad
                || nodes[gamma.idx].requires_grad
                || nodes[beta.idx].requires_grad;
            (x.shape.clone(), data, mean, var, istd, req)
        };
        let out = self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::BatchNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                mean: mean.clone(),
                istd,
                train: running.is_none(),
            },
        );
        Ok((out, mean, var))
    }

    /// Layer norm over the last dimension with learnable affine.
    pub fn layernorm(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        eps: f64,
    ) -> Result<Tensor<'t>, TensorError> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (out_shape, data, mean, istd, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let dim = *x.shape.last().ok_or(TensorError::RankMismatch {
                expected: 1,
                got: x.shape.clone(),
            })?;
            for t in [&gamma, &beta] {
                let s = &nodes[t.idx].value.shape;
                if *s != vec![dim] {
                    return Err(TensorError::ShapeMismatch {
                        expected: vec![dim],
                        got: s.clone(),
                    });
                }
            }
            let rows = x.numel() / dim;
            let gd = &nodes[gamma.idx].value.data;
            let bd = &nodes[beta.idx].value.data;
            let mut mean = vec![0.0; rows];
            let mut istd = vec![0.0; rows];
            let mut data = vec![0.0; x.data.len()];
            for r in 0..rows {
                let row = &x.data[r * dim..(r + 1) * dim];
                let m = row.iter().sum::<f64>() / dim as f64;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / dim as f64;
                let is = 1.0 / (v + eps).sqrt();
                mean[r] = m;
                istd[r] = is;
                for j in 0..dim {
                    data[r * dim + j] = gd[j] * (row[j] - m) * is + bd[j];
                }
            }
            let req = nodes[self.idx].requires_grad
                || nodes[gamma.idx].requires_grad
                || nodes[beta.idx].requires_grad;
            (x.shape.clone(), data, mean, istd, req)
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::LayerNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                mean,
                istd,
            },
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if axis >= x.shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: x.shape.len(),
                });
            }
            let axis_len = x.shape[axis];
            let inner: usize = x.shape[axis + 1..].iter().product();
            let outer: usize = x.shape[..axis].iter().product();
            let mut data = vec![0.0; x.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..axis_len {
                        max = max.max(x.data[base + a * inner]);
                    }
                    let mut total = 0.0;
                    for a in 0..axis_len {
                        let e = (x.data[base + a * inner] - max).exp();
                        data[base + a * inner] = e;
                        total += e;
                    }
                    for a in 0..axis_len {
                        data[base + a * inner] /= total;
                    }
                }
            }
            (x.shape.clone(), data, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::Softmax { x: self.idx, axis },
        ))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Tensor<'t>, TensorError> {
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if axis >= x.shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: x.shape.len(),
                });
            }
            let axis_len = x.shape[axis];
            let inner: usize = x.shape[axis + 1..].iter().product();
            let outer: usize = x.shape[..axis].iter().product();
            let mut out_shape = x.shape.clone();
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..axis_len {
                    for i in 0..inner {
                        data[o * inner + i] += x.data[(o * axis_len + a) * inner + i];
                    }
                }
            }
            if mean {
                for v in data.iter_mut() {
                    *v /= axis_len as f64;
                }
            }
            (out_shape, data, nodes[self.idx].requires_grad)
        };
        let op = if mean {
            Op::MeanAxis { x: self.idx, axis }
        } else {
            Op::SumAxis { x: self.idx, axis }
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            op,
        ))
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Tensor<'t>, TensorError> {
        self.reduce_axis(axis, false)
    }

    /// Sum of every element, as a `[1]`-shaped scalar.
    pub fn sum_all(self) -> Tensor<'t> {
        let (total, req) = {
            let nodes = self.tape.nodes.borrow();
            (
                nodes[self.idx].value.data.iter().sum::<f64>(),
                nodes[self.idx].requires_grad,
            )
        };
        self.tape
            .push(TensorData::scalar(total), req, Op::SumAll { x: self.idx })
    }

    pub fn mean_all(self) -> Tensor<'t> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Concatenates tensors along `axis`; all other dims must match.
    pub fn concat(tensors: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>, TensorError> {
        let first = tensors.first().expect("concat needs at least one tensor");
        for t in tensors {
            first.same_tape(t);
        }
        let tape = first.tape;
        let (out_shape, data, req) = {
            let nodes = tape.nodes.borrow();
            let base_shape = nodes[first.idx].value.shape.clone();
            if axis >= base_shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: base_shape.len(),
                });
            }
            let mut total_axis = 0;
            for t in tensors {
                let s = &nodes[t.idx].value.shape;
                if s.len() != base_shape.len()
                    || s.iter()
                        .zip(&base_shape)
                        .enumerate()
                        .any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(TensorError::ShapeMismatch {
                        expected: base_shape.clone(),
                        got: s.clone(),
                    });
                }
                total_axis += s[axis];
            }
            let mut out_shape = base_shape.clone();
            out_shape[axis] = total_axis;
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..axis].iter().product();
            let mut data = vec![0.0; out_shape.iter().product()];
            let mut offset = 0;
            for t in tensors {
                let v = &nodes[t.idx].value;
                let len = v.shape[axis];
                for o in 0..outer {
                    let dst = (o * total_axis + offset) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&v.data[src..src + len * inner]);
                }
                offset += len;
            }
            let req = tensors.iter().any(|t| nodes[t.idx].requires_grad);
            (out_shape, data, req)
        };
        Ok(tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::Concat {
                inputs: tensors.iter().map(|t| t.idx).collect(),
                axis,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Tensor<'t>, TensorError> {
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if axis >= x.shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: x.shape.len(),
                });
            }
            let dim = x.shape[axis];
            if start + len > dim {
                return Err(TensorError::NarrowOutOfRange { start, len, dim });
            }
            let inner: usize = x.shape[axis + 1..].iter().product();
            let outer: usize = x.shape[..axis].iter().product();
            let mut out_shape = x.shape.clone();
            out_shape[axis] = len;
            let mut data = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = (o * dim + start) * inner;
                let dst = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&x.data[src..src + len * inner]);
            }
            (out_shape, data, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::Narrow {
                x: self.idx,
                axis,
                start,
                len,
            },
        ))
    }

    /// Reorders dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let rank = x.shape.len();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(TensorError::BadPermutation(perm.to_vec()));
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
            let in_strides = strides_for(&x.shape);
            let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let zero = vec![0usize; rank];
            let mut data = vec![0.0; x.data.len()];
            for_each_broadcast(&out_shape, &gather, &zero, |flat, in_off, _| {
                data[flat] = x.data[in_off];
            });
            (out_shape, data, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data,
            },
            req,
            Op::Permute {
                x: self.idx,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let (value, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let to_n: usize = shape.iter().product();
            if to_n != x.numel() {
                return Err(TensorError::ReshapeMismatch {
                    from: x.shape.clone(),
                    from_n: x.numel(),
                    to: shape.to_vec(),
                    to_n,
                });
            }
            (
                TensorData {
                    shape: shape.to_vec(),
                    data: x.data.clone(),
                },
                nodes[self.idx].requires_grad,
            )
        };
        Ok(self.tape.push(value, req, Op::Reshape { x: self.idx }))
    }

    /// Materialized broadcast to a larger shape (backward sums).
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let (value, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let out = broadcast_shape(&x.shape, shape)
                .filter(|o| o == shape)
                .ok_or_else(|| TensorError::BroadcastMismatch(x.shape.clone(), shape.to_vec()))?;
            let strides = aligned_strides(&x.shape, &out);
            let zero = vec![0usize; out.len()];
            let mut data = vec![0.0; out.iter().product()];
            for_each_broadcast(&out, &strides, &zero, |flat, off, _| {
                data[flat] = x.data[off];
            });
            (
                TensorData {
                    shape: out,
                    data,
                },
                nodes[self.idx].requires_grad,
            )
        };
        Ok(self.tape.push(value, req, Op::BroadcastTo { x: self.idx }))
    }

    /// Inverted dropout: keeps an element with probability `1 − rate`,
    /// scaling survivors by `1/(1 − rate)`.
    pub fn dropout<R: Rng>(self, rate: f64, rng: &mut R) -> Result<Tensor<'t>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadDropoutRate(rate));
        }
        let (value, mask, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let keep = 1.0 - rate;
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let data: Vec<f64> = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
            (
                TensorData {
                    shape: x.shape.clone(),
                    data,
                },
                mask,
                nodes[self.idx].requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            req,
            Op::Dropout {
                x: self.idx,
                mask,
            },
        ))
    }

    /// Selective state-space recurrence over `(batch, time, channels)`.
    ///
    /// Per channel `c` a `state_dim`-vector evolves as
    /// `h_t = exp(Δ_t[c]·A[c])⊙h_{t−1} + Δ_t[c]·B_t·x_t[c]`, and the
    /// output is `y_t[c] = ⟨C_t, h_t⟩`. `delta` must already be
    /// positive (softplus applied upstream); `a_diag` holds the diagonal
    /// state matrix per channel, shape `(channels, state_dim)`.
    pub fn selective_scan(
        self,
        delta: Tensor<'t>,
        b_seq: Tensor<'t>,
        c_seq: Tensor<'t>,
        a_diag: Tensor<'t>,
    ) -> Result<Tensor<'t>, TensorError> {
        for t in [&delta, &b_seq, &c_seq, &a_diag] {
            self.same_tape(t);
        }
        let (out, h_all, abar, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.shape.len() != 3 {
                return Err(TensorError::RankMismatch {
                    expected: 3,
                    got: x.shape.clone(),
                });
            }
            let (batch, t_len, ch) = (x.shape[0], x.shape[1], x.shape[2]);
            let d = &nodes[delta.idx].value;
            if d.shape != x.shape {
                return Err(TensorError::ShapeMismatch {
                    expected: x.shape.clone(),
                    got: d.shape.clone(),
                });
            }
            let b = &nodes[b_seq.idx].value;
            let c = &nodes[c_seq.idx].value;
            if b.shape.len() != 3 || b.shape[0] != batch || b.shape[1] != t_len {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![batch, t_len, 0],
                    got: b.shape.clone(),
                });
            }
            let s_dim = b.shape[2];
            if c.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    expected: b.shape.clone(),
                    got: c.shape.clone(),
                });
            }
            let a = &nodes[a_diag.idx].value;
            if a.shape != vec![ch, s_dim] {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![ch, s_dim],
                    got: a.shape.clone(),
                });
            }
            let step = ch * s_dim;
            let mut h_all = vec![0.0; batch * t_len * step];
            let mut abar = vec![0.0; batch * t_len * step];
            let mut out = vec![0.0; batch * t_len * ch];
            let mut h = vec![0.0; step];
            for bi in 0..batch {
                h.fill(0.0);
                for t in 0..t_len {
                    let bc_base = (bi * t_len + t) * s_dim;
                    let xc_base = (bi * t_len + t) * ch;
                    let blk = (bi * t_len + t) * step;
                    for cch in 0..ch {
                        let dt = d.data[xc_base + cch];
                        let xv = x.data[xc_base + cch];
                        let mut y = 0.0;
                        for s in 0..s_dim {
                            let ab = (dt * a.data[cch * s_dim + s]).exp();
                            let hv = ab * h[cch * s_dim + s] + dt * b.data[bc_base + s] * xv;
                            h[cch * s_dim + s] = hv;
                            abar[blk + cch * s_dim + s] = ab;
                            h_all[blk + cch * s_dim + s] = hv;
                            y += c.data[bc_base + s] * hv;
                        }
                        out[xc_base + cch] = y;
                    }
                }
            }
            let req = [self.idx, delta.idx, b_seq.idx, c_seq.idx, a_diag.idx]
                .iter()
                .any(|&i| nodes[i].requires_grad);
            (
                TensorData {
                    shape: x.shape.clone(),
                    data: out,
                },
                h_all,
                abar,
                req,
            )
        };
        Ok(self.tape.push(
            out,
            req,
            Op::SelectiveScan {
                x: self.idx,
                delta: delta.idx,
                b_seq: b_seq.idx,
                c_seq: c_seq.idx,
                a_diag: a_diag.idx,
                h_all,
                abar,
            },
        ))
    }

    /// Class-weighted cross-entropy over `(batch, classes)` logits,
    /// averaged with the weight-sum denominator.
    pub fn cross_entropy(
        self,
        targets: &[usize],
        class_weights: &[f64],
    ) -> Result<Tensor<'t>, TensorError> {
        let (loss, probs, weight_sum, req) = {
            let nodes = self.tape.nodes.borrow();
            let z = &nodes[self.idx].value;
            if z.shape.len() != 2 {
                return Err(TensorError::RankMismatch {
                    expected: 2,
                    got: z.shape.clone(),
                });
            }
            let (batch, classes) = (z.shape[0], z.shape[1]);
            if targets.len() != batch {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![batch],
                    got: vec![targets.len()],
                });
            }
            if class_weights.len() != classes {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![classes],
                    got: vec![class_weights.len()],
                });
            }
            let mut probs = vec![0.0; batch * classes];
            let mut loss = 0.0;
            let mut weight_sum = 0.0;
            for (b, &y) in targets.iter().enumerate() {
                if y >= classes {
                    return Err(TensorError::LabelOutOfRange { label: y, classes });
                }
                let row = &z.data[b * classes..(b + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[b * classes + j] = e;
                    total += e;
                }
                for j in 0..classes {
                    probs[b * classes + j] /= total;
                }
                let logp = (row[y] - max) - total.ln();
                let w = class_weights[y];
                loss -= w * logp;
                weight_sum += w;
            }
            if weight_sum <= 0.0 {
                return Err(TensorError::NonFinite("cross_entropy weight sum"));
            }
            loss /= weight_sum;
            if !loss.is_finite() {
                return Err(TensorError::NonFinite("cross_entropy"));
            }
            (loss, probs, weight_sum, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(
            TensorData::scalar(loss),
            req,
            Op::CrossEntropy {
                logits: self.idx,
                targets: targets.to_vec(),
                weights: class_weights.to_vec(),
                probs,
                weight_sum,
            },
        ))
    }
}
