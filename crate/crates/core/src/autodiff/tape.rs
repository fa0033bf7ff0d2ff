//! Append-only operation tape and the differentiable ops recorded on it.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels::{erf, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use crate::tensor::{axis_blocks, numel, strides, Broadcast, Result, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Erf,
    Relu,
    Neg,
    Scale(f64),
    Offset(f64),
    Sqrt,
    Recip,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Sliding-window geometry for [`Var::unfold2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
}

impl Window {
    /// Output extent of a valid (unpadded) window sweep over `len` positions.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        plan: Broadcast,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        b_batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Unary {
        a: NodeId,
        kind: UnaryKind,
    },
    Reduce {
        a: NodeId,
        axis: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    Reshape {
        a: NodeId,
    },
    Permute {
        a: NodeId,
        perm: Vec<usize>,
    },
    Narrow {
        a: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Softmax {
        a: NodeId,
    },
    LogSoftmax {
        a: NodeId,
    },
    LogSumExp {
        a: NodeId,
        axis: usize,
    },
    Gather {
        a: NodeId,
        index: Vec<usize>,
    },
    RelShift {
        a: NodeId,
    },
    DwConv1d {
        x: NodeId,
        w: NodeId,
    },
    Unfold2d {
        x: NodeId,
        window: Window,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and a single reverse sweep visits each node once. Start a fresh tape
/// (or call [`Tape::reset`]) for every optimisation step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
    verification: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("macs", &self.macs())
            .field("verification", &self.verification)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            macs: Cell::new(0),
            verification: false,
        }
    }

    /// A tape that rejects any op producing NaN/Inf from its inputs.
    pub fn verifying() -> Self {
        Tape {
            verification: true,
            ..Self::new()
        }
    }

    pub fn is_verifying(&self) -> bool {
        self.verification
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates performed by matmul and convolution ops so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Drops every recorded node. Requires exclusive access, so no [`Var`]
    /// from the previous run can outlive the reset.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.macs.set(0);
    }

    /// Input tensor that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, true)
    }

    /// Input tensor that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, false)
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.insert(value, Op::Leaf, requires_grad)
    }

    fn insert(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.verification && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.insert(value, op, requires_grad))
    }

    fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut extent = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        self.record(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].requires_grad)
                    .map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    // -- elementwise ------------------------------------------------------

    /// `a op b` where `b` broadcasts onto `a` over trailing axes.
    pub fn binary(&self, kind: BinaryKind, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let plan = Broadcast::plan(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = match (&plan, kind) {
            (Broadcast::Same, BinaryKind::Add) => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            (Broadcast::Same, BinaryKind::Mul) => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
            _ => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[plan.index(i)];
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                    }
                })
                .collect(),
        };
        self.tape.record(
            name,
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                plan,
            },
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Var<'t>> {
        let x = self.value();
        if kind == UnaryKind::Log {
            if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(TensorError::Domain { op: "log", value: bad });
            }
        }
        if kind == UnaryKind::Sqrt {
            if let Some(&bad) = x.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                return Err(TensorError::Domain { op: "sqrt", value: bad });
            }
        }
        let f = |v: f64| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Erf => erf(v),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Neg => -v,
            UnaryKind::Scale(c) => c * v,
            UnaryKind::Offset(c) => v + c,
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Recip => 1.0 / v,
            UnaryKind::Square => v * v,
        };
        self.tape.record("unary", x.map(f), Op::Unary { a: self.id, kind })
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn erf(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Erf)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn offset(&self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Offset(c))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Recip)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Square)
    }

    // -- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n]`. The batch prefix of
    /// the right operand must equal a trailing part of the left prefix
    /// (possibly empty, in which case it is shared by every batch).
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::InnerDim {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let pa = &sa[..sa.len() - 2];
        let pb = &sb[..sb.len() - 2];
        if pb.len() > pa.len() || pa[pa.len() - pb.len()..] != *pb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        // A shared right operand lets the whole left batch act as one tall matrix.
        let (batch, b_batch, m) = if pb.is_empty() {
            (1, 1, numel(pa) * m)
        } else {
            (numel(pa), numel(pb), m)
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bj = bi % b_batch;
            gemm_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bj * k * n..(bj + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let tape = self.tape;
        tape.macs
            .set(tape.macs.get() + (batch * m * k * n) as u64);
        let mut shape = pa.to_vec();
        shape.push(sa[sa.len() - 2]);
        shape.push(n);
        tape.record(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                b_batch,
                m,
                k,
                n,
            },
        )
    }

    // -- reductions ----------------------------------------------------------

    pub fn reduce(&self, axis: usize, kind: ReduceKind, keep_dim: bool) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_blocks(shape, axis);
        let data = x.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for j in 0..n {
                        let src = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                if n == 0 {
                    return Err(TensorError::Invalid("max over an empty axis".into()));
                }
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for j in 0..n {
                            let v = data[(o * n + j) * inner + i];
                            if v > best || j == 0 {
                                best = v;
                                arg = j;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = arg;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        if keep_dim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        self.tape.record(
            "reduce",
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                a: self.id,
                axis,
                kind,
                argmax,
            },
        )
    }

    pub fn sum(&self, axis: usize, keep_dim: bool) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Sum, keep_dim)
    }

    pub fn mean(&self, axis: usize, keep_dim: bool) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Mean, keep_dim)
    }

    pub fn max(&self, axis: usize, keep_dim: bool) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Max, keep_dim)
    }

    /// Sum of every element as a scalar.
    pub fn sum_all(&self) -> Result<Var<'t>> {
        self.reshape(&[self.value().numel()])?.sum(0, false)
    }

    // -- layout ----------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.record("reshape", v, Op::Reshape { a: self.id })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        let valid = perm.len() == x.rank()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                x.rank()
            )));
        }
        let (shape, data) = permute_data(x.data(), x.shape(), perm);
        self.tape.record(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow: range {start}..{} exceeds extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = axis_blocks(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.record(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
        )
    }

    /// Splits `axis` into equal halves, preserving order.
    pub fn split2(&self, axis: usize) -> Result<(Var<'t>, Var<'t>)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "split",
                axis,
                rank: shape.len(),
            });
        }
        let extent = shape[axis];
        if extent % 2 != 0 {
            return Err(TensorError::OddSplit { axis, extent });
        }
        let half = extent / 2;
        Ok((self.narrow(axis, 0, half)?, self.narrow(axis, half, half)?))
    }

    // -- fused normalisations ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or(TensorError::AxisOutOfRange {
            op: "softmax",
            axis: 0,
            rank: 0,
        })?;
        let out = softmax_rows(x.data(), n, |_| true);
        self.tape.record(
            "softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax { a: self.id },
        )
    }

    /// Softmax over the last axis restricted to entries where `valid`
    /// (broadcast onto this tensor) is non-zero. Excluded entries get weight
    /// exactly 0; a row with no valid entry is all zeros.
    pub fn masked_softmax(&self, valid: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or(TensorError::AxisOutOfRange {
            op: "masked_softmax",
            axis: 0,
            rank: 0,
        })?;
        let plan = Broadcast::plan("masked_softmax", x.shape(), valid.shape())?;
        let mask = valid.data();
        let out = softmax_rows(x.data(), n, |i| mask[plan.index(i)] != 0.0);
        self.tape.record(
            "masked_softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax { a: self.id },
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or(TensorError::AxisOutOfRange {
            op: "log_softmax",
            axis: 0,
            rank: 0,
        })?;
        let mut out = x.to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.tape.record(
            "log_softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LogSoftmax { a: self.id },
        )
    }

    /// `log Σ exp` along `axis` (removed from the shape).
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "logsumexp",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_blocks(shape, axis);
        let d = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + (0..n).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        self.tape.record(
            "logsumexp",
            Tensor::from_parts(out_shape, out),
            Op::LogSumExp { a: self.id, axis },
        )
    }

    // -- indexing --------------------------------------------------------------

    /// Selects positions of the last axis: `out[.., j] = in[.., index[j]]`.
    pub fn gather_last(&self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or(TensorError::AxisOutOfRange {
            op: "gather",
            axis: 0,
            rank: 0,
        })?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid(format!(
                "gather: index {bad} out of range for extent {n}"
            )));
        }
        let rows = x.numel() / n.max(1);
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            out.extend(index.iter().map(|&i| row[i]));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = index.len();
        self.tape.record(
            "gather",
            Tensor::from_parts(shape, out),
            Op::Gather {
                a: self.id,
                index: index.to_vec(),
            },
        )
    }

    /// Aligns relative-offset scores `[.., T, 2T-1]` to key positions:
    /// `out[.., i, j] = in[.., i, (T-1) + j - i]`.
    pub fn rel_shift(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 1] + 1 != 2 * s[s.len() - 2] {
            return Err(TensorError::Invalid(format!(
                "rel_shift: expected trailing extents [T, 2T-1], got {s:?}"
            )));
        }
        let t = s[s.len() - 2];
        let w = 2 * t - 1;
        let blocks = x.numel() / (t * w);
        let mut out = Vec::with_capacity(blocks * t * t);
        for b in 0..blocks {
            for i in 0..t {
                let row = &x.data()[(b * t + i) * w..(b * t + i + 1) * w];
                out.extend((0..t).map(|j| row[t - 1 + j - i]));
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = t;
        self.tape.record(
            "rel_shift",
            Tensor::from_parts(shape, out),
            Op::RelShift { a: self.id },
        )
    }

    // -- convolutions ----------------------------------------------------------

    /// Per-channel 1-D convolution over time with "same" zero padding.
    /// `self`: `[B, T, C]`, `kernel`: `[C, k]` with odd `k`.
    pub fn depthwise_conv1d(&self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (bsz, t, c) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        if k % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "depthwise_conv1d: kernel size {k} must be odd"
            )));
        }
        let pad = k / 2;
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; bsz * t * c];
        for b in 0..bsz {
            for ti in 0..t {
                let dst = &mut out[(b * t + ti) * c..(b * t + ti + 1) * c];
                for j in 0..k {
                    let Some(src_t) = (ti + j).checked_sub(pad).filter(|&s| s < t) else {
                        continue;
                    };
                    let src = &xd[(b * t + src_t) * c..(b * t + src_t + 1) * c];
                    for ch in 0..c {
                        dst[ch] += src[ch] * wd[ch * k + j];
                    }
                }
            }
        }
        let tape = self.tape;
        tape.macs.set(tape.macs.get() + (bsz * t * c * k) as u64);
        tape.record(
            "depthwise_conv1d",
            Tensor::from_parts(xs.to_vec(), out),
            Op::DwConv1d {
                x: self.id,
                w: kernel.id,
            },
        )
    }

    /// Extracts valid 2-D patches from channels-last `[B, T, F, C]`,
    /// giving `[B, T', F', k·k·C]` with patch layout `(di, dj, c)`.
    pub fn unfold2d(&self, window: Window) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid(format!(
                "unfold2d: expected [B, T, F, C], got {s:?}"
            )));
        }
        let (bsz, t, f, c) = (s[0], s[1], s[2], s[3]);
        let (Some(t_out), Some(f_out)) = (window.out_len(t), window.out_len(f)) else {
            return Err(TensorError::Invalid(format!(
                "unfold2d: input {t}x{f} smaller than a {0}x{0} window",
                window.kernel
            )));
        };
        let k = window.kernel;
        let patch = k * k * c;
        let mut out = Vec::with_capacity(bsz * t_out * f_out * patch);
        let xd = x.data();
        for b in 0..bsz {
            for to in 0..t_out {
                for fo in 0..f_out {
                    for di in 0..k {
                        for dj in 0..k {
                            let ti = to * window.stride + di;
                            let fi = fo * window.stride + dj;
                            let base = ((b * t + ti) * f + fi) * c;
                            out.extend_from_slice(&xd[base..base + c]);
                        }
                    }
                }
            }
        }
        self.tape.record(
            "unfold2d",
            Tensor::from_parts(vec![bsz, t_out, f_out, patch], out),
            Op::Unfold2d { x: self.id, window },
        )
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::DwConv1d { x, w } => vec![*x, *w],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Unary { a, .. }
        | Op::Reduce { a, .. }
        | Op::Reshape { a }
        | Op::Permute { a, .. }
        | Op::Narrow { a, .. }
        | Op::Softmax { a }
        | Op::LogSoftmax { a }
        | Op::LogSumExp { a, .. }
        | Op::Gather { a, .. }
        | Op::RelShift { a } => vec![*a],
        Op::Unfold2d { x, .. } => vec![*x],
    }
}

fn softmax_rows(x: &[f64], n: usize, valid: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if n == 0 {
        return out;
    }
    for (r, (src, dst)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let base = r * n;
        let m = (0..n)
            .filter(|&j| valid(base + j))
            .map(|j| src[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..n {
            if valid(base + j) {
                dst[j] = (src[j] - m).exp();
                total += dst[j];
            }
        }
        dst.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(data[cur]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| &nodes[id].value;
    let wants = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, plan } => {
            let (av, bv) = (val(*a), val(*b));
            match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    if wants(*a) {
                        accumulate(grads, nodes, *a, g.to_vec());
                    }
                    if wants(*b) {
                        let mut gb = plan.reduce(g, bv.numel());
                        if *kind == BinaryKind::Sub {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(grads, nodes, *b, gb);
                    }
                }
                BinaryKind::Mul => {
                    if wants(*a) {
                        let bd = bv.data();
                        let ga = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bd[plan.index(i)])
                            .collect();
                        accumulate(grads, nodes, *a, ga);
                    }
                    if wants(*b) {
                        let prod: Vec<f64> = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                        accumulate(grads, nodes, *b, plan.reduce(&prod, bv.numel()));
                    }
                }
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            b_batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let (m, k, n) = (*m, *k, *n);
            if wants(*a) {
                let mut ga = vec![0.0; av.len()];
                for bi in 0..*batch {
                    let bj = bi % b_batch;
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[bj * k * n..(bj + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(grads, nodes, *a, ga);
            }
            if wants(*b) {
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..*batch {
                    let bj = bi % b_batch;
                    gemm_tn(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bj * k * n..(bj + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Unary { a, kind } => {
            let x = val(*a).data();
            let y = node.value.data();
            let ga = g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&gi, (&xi, &yi))| {
                    gi * match kind {
                        UnaryKind::Exp => yi,
                        UnaryKind::Log => 1.0 / xi,
                        UnaryKind::Sigmoid => yi * (1.0 - yi),
                        UnaryKind::Tanh => 1.0 - yi * yi,
                        UnaryKind::Erf => {
                            std::f64::consts::FRAC_2_SQRT_PI * (-xi * xi).exp()
                        }
                        UnaryKind::Relu => {
                            if xi > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Scale(c) => *c,
                        UnaryKind::Offset(_) => 1.0,
                        UnaryKind::Sqrt => 0.5 / yi,
                        UnaryKind::Recip => -yi * yi,
                        UnaryKind::Square => 2.0 * xi,
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Reduce {
            a,
            axis,
            kind,
            argmax,
        } => {
            let shape = val(*a).shape();
            let (outer, n, inner) = axis_blocks(shape, *axis);
            let mut ga = vec![0.0; outer * n * inner];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let scale = if *kind == ReduceKind::Mean {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                ga[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                }
                ReduceKind::Max => {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i];
                            ga[(o * n + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Reshape { a } => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Permute { a, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, ga) = permute_data(g, node.value.shape(), &inverse);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Narrow { a, axis, start } => {
            let shape = val(*a).shape();
            let (outer, n, inner) = axis_blocks(shape, *axis);
            let len = node.value.shape()[*axis];
            let mut ga = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                ga[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = axis_blocks(shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if wants(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, nodes, p, gp);
                }
                offset += len;
            }
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSoftmax { a } => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                let total: f64 = gr.iter().sum();
                for j in 0..n {
                    dst[j] = gr[j] - yr[j].exp() * total;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSumExp { a, axis } => {
            let x = val(*a);
            let (outer, n, inner) = axis_blocks(x.shape(), *axis);
            let (xd, y) = (x.data(), node.value.data());
            let mut ga = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let yi = y[o * inner + i];
                    if yi == f64::NEG_INFINITY {
                        continue;
                    }
                    let gi = g[o * inner + i];
                    for j in 0..n {
                        let at = (o * n + j) * inner + i;
                        ga[at] = gi * (xd[at] - yi).exp();
                    }
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Gather { a, index } => {
            let x = val(*a);
            let n = *x.shape().last().unwrap();
            let w = index.len();
            let mut ga = vec![0.0; x.numel()];
            for (r, gr) in g.chunks(w.max(1)).enumerate() {
                for (j, &src) in index.iter().enumerate() {
                    ga[r * n + src] += gr[j];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::RelShift { a } => {
            let x = val(*a);
            let s = x.shape();
            let t = s[s.len() - 2];
            let w = 2 * t - 1;
            let mut ga = vec![0.0; x.numel()];
            for b in 0..x.numel() / (t * w) {
                for i in 0..t {
                    for j in 0..t {
                        ga[(b * t + i) * w + t - 1 + j - i] += g[(b * t + i) * t + j];
                    }
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::DwConv1d { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let xs = xv.shape();
            let (bsz, t, c) = (xs[0], xs[1], xs[2]);
            let k = wv.shape()[1];
            let pad = k / 2;
            let (xd, wd) = (xv.data(), wv.data());
            let mut gx = if wants(*x) { vec![0.0; xd.len()] } else { Vec::new() };
            let mut gw = if wants(*w) { vec![0.0; wd.len()] } else { Vec::new() };
            for b in 0..bsz {
                for ti in 0..t {
                    let gr = &g[(b * t + ti) * c..(b * t + ti + 1) * c];
                    for j in 0..k {
                        let Some(src_t) = (ti + j).checked_sub(pad).filter(|&s| s < t) else {
                            continue;
                        };
                        let base = (b * t + src_t) * c;
                        for ch in 0..c {
                            if !gx.is_empty() {
                                gx[base + ch] += gr[ch] * wd[ch * k + j];
                            }
                            if !gw.is_empty() {
                                gw[ch * k + j] += gr[ch] * xd[base + ch];
                            }
                        }
                    }
                }
            }
            if !gx.is_empty() {
                accumulate(grads, nodes, *x, gx);
            }
            if !gw.is_empty() {
                accumulate(grads, nodes, *w, gw);
            }
        }
        Op::Unfold2d { x, window } => {
            let xv = val(*x);
            let s = xv.shape();
            let (bsz, t, f, c) = (s[0], s[1], s[2], s[3]);
            let os = node.value.shape();
            let (t_out, f_out) = (os[1], os[2]);
            let k = window.kernel;
            let mut gx = vec![0.0; xv.numel()];
            let mut src = 0;
            for b in 0..bsz {
                for to in 0..t_out {
                    for fo in 0..f_out {
                        for di in 0..k {
                            for dj in 0..k {
                                let ti = to * window.stride + di;
                                let fi = fo * window.stride + dj;
                                let base = ((b * t + ti) * f + fi) * c;
                                for ch in 0..c {
                                    gx[base + ch] += g[src + ch];
                                }
                                src += c;
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
    }
}
