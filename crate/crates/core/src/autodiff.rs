//! Reverse-mode differentiation over a per-pass tape.
//!
//! A [`Tape`] records every value produced during one forward pass together
//! with the operation that produced it. [`Tape::backward`] walks the record
//! in reverse, returning [`Gradients`] for every node and for every
//! trainable tensor that was read through [`Tape::param`]. The tape is
//! dropped after the pass; nothing is cached across steps.
//!
//! Binary element-wise operations accept operands of identical shape, or a
//! single-element operand that broadcasts as a scalar. Nothing else.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, DType, ParamId, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    L2Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Binary(BinOp, usize, usize),
    Scale(usize, f64),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Silu(usize),
    Reduce {
        x: usize,
        op: ReduceOp,
        axis: Option<usize>,
    },
    AddBias(usize, usize),
    MulCols(usize, usize),
    RecipClamped(usize, f64),
    TakeRows {
        x: usize,
        offset: usize,
        stride: usize,
    },
    Interleave(usize, usize),
    ConcatRows(Vec<usize>),
    GatherCols {
        table: usize,
        ids: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Records a value that gradients are reported for but that is not a
    /// parameter (an input activation, say).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.detach(), Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detach(), Op::Leaf, false)
    }

    /// Reads a tensor. Trainable tensors are tracked so that
    /// [`Gradients::accumulate_into`] can find them; frozen ones become
    /// constants.
    pub fn param(&mut self, t: &Tensor) -> Var {
        match t.param_id() {
            Some(id) => self.push(t.detach(), Op::Param(id), true),
            None => self.push(t.detach(), Op::Leaf, false),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        tensor::check_matmul(ta, tb)?;
        let out = ta.matmul(tb)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), ng))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dtype() != tb.dtype() {
            return Err(Error::DTypeMismatch {
                op: name,
                lhs: ta.dtype(),
                rhs: tb.dtype(),
            });
        }
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), d)
        } else if tb.numel() == 1 {
            let y = tb.item();
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.numel() == 1 {
            let x = ta.item();
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::Broadcast {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let out = finish(shape, data, ta.dtype());
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::Binary(op, a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = finish(t.shape().to_vec(), data, t.dtype());
        let ng = self.ng(x.0);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x.0), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x.0), f64::cos)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x.0), |v| v * sigmoid(v))
    }

    /// `1 / max(x, floor)`; the gradient is zero where the clamp is active.
    pub fn recip_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::RecipClamped(x.0, floor), |v| 1.0 / v.max(floor))
    }

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let (out_shape, outer, len, inner) = reduce_geometry(t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = d[base + i];
                    out[o * inner + i] += match op {
                        ReduceOp::L2Norm => v * v,
                        _ => v,
                    };
                }
            }
        }
        match op {
            ReduceOp::Sum => {}
            ReduceOp::Mean => {
                let n = len.max(1) as f64;
                out.iter_mut().for_each(|v| *v /= n);
            }
            ReduceOp::L2Norm => out.iter_mut().for_each(|v| *v = v.sqrt()),
        }
        let out = finish(out_shape, out, t.dtype());
        let ng = self.ng(x.0);
        Ok(self.push(out, Op::Reduce { x: x.0, op, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceOp::Sum, x, None).expect("full reduction is always valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceOp::Mean, x, None).expect("full reduction is always valid")
    }

    /// `x[i, j] + bias[i]` for a `d×n` matrix and a length-`d` bias.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.numel() != tx.rows() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(k, &v)| v + b[k / n]).collect();
        let out = finish(tx.shape().to_vec(), data, tx.dtype());
        let ng = self.ng(x.0) || self.ng(bias.0);
        Ok(self.push(out, Op::AddBias(x.0, bias.0), ng))
    }

    /// Scales column `j` of a `d×k` matrix by `s[j]`.
    pub fn mul_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.numel() != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "mul_cols",
                lhs: tx.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let k = tx.cols();
        let sd = ts.data();
        let data = tx.data().iter().enumerate().map(|(e, &v)| v * sd[e % k]).collect();
        let out = finish(tx.shape().to_vec(), data, tx.dtype());
        let ng = self.ng(x.0) || self.ng(s.0);
        Ok(self.push(out, Op::MulCols(x.0, s.0), ng))
    }

    /// Rows `offset, offset + stride, …` of a matrix.
    pub fn take_rows(&mut self, x: Var, offset: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || stride == 0 || offset >= t.rows().max(1) {
            return Err(Error::ShapeMismatch {
                op: "take_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![offset, stride],
            });
        }
        let c = t.cols();
        let rows: Vec<usize> = (offset..t.rows()).step_by(stride).collect();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
        let out = Tensor::raw(vec![rows.len(), c], data, t.dtype());
        let ng = self.ng(x.0);
        Ok(self.push(out, Op::TakeRows { x: x.0, offset, stride }, ng))
    }

    /// Interleaves the rows of two equally shaped matrices:
    /// `a[0], b[0], a[1], b[1], …`.
    pub fn interleave_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "interleave_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (h, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(2 * h * c);
        for r in 0..h {
            data.extend_from_slice(&ta.data()[r * c..(r + 1) * c]);
            data.extend_from_slice(&tb.data()[r * c..(r + 1) * c]);
        }
        let out = Tensor::raw(vec![2 * h, c], data, ta.dtype());
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::Interleave(a.0, b.0), ng))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (c, dtype) = (first.cols(), first.dtype());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let out = Tensor::raw(vec![rows, c], data, dtype);
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Column lookup: `out[:, j] = table[:, ids[j]]`.
    pub fn gather_cols(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.iter().any(|&i| i >= t.cols()) {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.iter().copied().max().unwrap_or(0)],
            });
        }
        let (e, c) = (t.rows(), t.cols());
        let n = ids.len();
        let mut data = vec![0.0; e * n];
        for r in 0..e {
            for (j, &id) in ids.iter().enumerate() {
                data[r * n + j] = t.data()[r * c + id];
            }
        }
        let out = Tensor::raw(vec![e, n], data, t.dtype());
        let ng = self.ng(table.0);
        Ok(self.push(out, Op::GatherCols { table: table.0, ids: ids.to_vec() }, ng))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut adj);
            }
            adj[idx] = Some(g);
        }
        let mut params: HashMap<ParamId, Vec<f64>> = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &adj[idx]) {
                match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { adj, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, n, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.ng(*a) {
                    let acc = slot(adj, *a, m * n);
                    tensor::matmul_nt_acc(g, tb.data(), acc, m, p, n);
                }
                if self.ng(*b) {
                    let acc = slot(adj, *b, n * p);
                    tensor::matmul_tn_acc(ta.data(), g, acc, m, n, p);
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                for (side, this, other, is_rhs) in [(*a, ta, tb, false), (*b, tb, ta, true)] {
                    if !self.ng(side) {
                        continue;
                    }
                    let local = |e: usize| -> f64 {
                        match op {
                            BinOp::Add => 1.0,
                            BinOp::Sub if is_rhs => -1.0,
                            BinOp::Sub => 1.0,
                            BinOp::Mul if other.numel() == 1 => other.item(),
                            BinOp::Mul => other.data()[e],
                        }
                    };
                    let n = this.numel();
                    let acc = slot(adj, side, n);
                    if n == 1 && g.len() > 1 {
                        acc[0] += g.iter().enumerate().map(|(e, gv)| gv * local(e)).sum::<f64>();
                    } else {
                        for (e, gv) in g.iter().enumerate() {
                            acc[e] += gv * local(e);
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let acc = slot(adj, *x, g.len());
                for (a, gv) in acc.iter_mut().zip(g) {
                    *a += gv * c;
                }
            }
            Op::Sin(x) => {
                let xv = val(*x).data();
                let acc = slot(adj, *x, g.len());
                for e in 0..g.len() {
                    acc[e] += g[e] * xv[e].cos();
                }
            }
            Op::Cos(x) => {
                let xv = val(*x).data();
                let acc = slot(adj, *x, g.len());
                for e in 0..g.len() {
                    acc[e] -= g[e] * xv[e].sin();
                }
            }
            Op::Square(x) => {
                let xv = val(*x).data();
                let acc = slot(adj, *x, g.len());
                for e in 0..g.len() {
                    acc[e] += 2.0 * g[e] * xv[e];
                }
            }
            Op::Silu(x) => {
                let xv = val(*x).data();
                let acc = slot(adj, *x, g.len());
                for e in 0..g.len() {
                    let s = sigmoid(xv[e]);
                    acc[e] += g[e] * s * (1.0 + xv[e] * (1.0 - s));
                }
            }
            Op::RecipClamped(x, floor) => {
                let xv = val(*x).data();
                let acc = slot(adj, *x, g.len());
                for e in 0..g.len() {
                    if xv[e] > *floor {
                        acc[e] -= g[e] / (xv[e] * xv[e]);
                    }
                }
            }
            Op::Reduce { x, op, axis } => {
                let tx = val(*x);
                let (_, outer, len, inner) =
                    reduce_geometry(tx.shape(), *axis).expect("validated in forward");
                let out = node.value.data();
                let xv = tx.data();
                let acc = slot(adj, *x, tx.numel());
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            let gi = g[o * inner + i];
                            acc[base + i] += match op {
                                ReduceOp::Sum => gi,
                                ReduceOp::Mean => gi / len as f64,
                                ReduceOp::L2Norm => {
                                    let nrm = out[o * inner + i];
                                    if nrm > 0.0 {
                                        gi * xv[base + i] / nrm
                                    } else {
                                        0.0
                                    }
                                }
                            };
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let n = val(*x).cols();
                if self.ng(*x) {
                    let acc = slot(adj, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(a, gv)| *a += gv);
                }
                if self.ng(*b) {
                    let d = val(*b).numel();
                    let acc = slot(adj, *b, d);
                    for (e, gv) in g.iter().enumerate() {
                        acc[e / n] += gv;
                    }
                }
            }
            Op::MulCols(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let k = tx.cols();
                if self.ng(*x) {
                    let sd = ts.data();
                    let acc = slot(adj, *x, g.len());
                    for (e, gv) in g.iter().enumerate() {
                        acc[e] += gv * sd[e % k];
                    }
                }
                if self.ng(*s) {
                    let xd = tx.data();
                    let acc = slot(adj, *s, k);
                    for (e, gv) in g.iter().enumerate() {
                        acc[e % k] += gv * xd[e];
                    }
                }
            }
            Op::TakeRows { x, offset, stride } => {
                let tx = val(*x);
                let c = tx.cols();
                let acc = slot(adj, *x, tx.numel());
                for (k, r) in (*offset..tx.rows()).step_by(*stride).enumerate() {
                    for j in 0..c {
                        acc[r * c + j] += g[k * c + j];
                    }
                }
            }
            Op::Interleave(a, b) => {
                let ta = val(*a);
                let (h, c) = (ta.rows(), ta.cols());
                for (side, parity) in [(*a, 0usize), (*b, 1usize)] {
                    if !self.ng(side) {
                        continue;
                    }
                    let acc = slot(adj, side, h * c);
                    for r in 0..h {
                        let src = (2 * r + parity) * c;
                        for j in 0..c {
                            acc[r * c + j] += g[src + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if self.ng(p) {
                        let acc = slot(adj, p, n);
                        for e in 0..n {
                            acc[e] += g[off + e];
                        }
                    }
                    off += n;
                }
            }
            Op::GatherCols { table, ids } => {
                let tt = val(*table);
                let (e, c) = (tt.rows(), tt.cols());
                let n = ids.len();
                let acc = slot(adj, *table, e * c);
                for r in 0..e {
                    for (j, &id) in ids.iter().enumerate() {
                        acc[r * c + id] += g[r * n + j];
                    }
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], idx: usize, n: usize) -> &'a mut Vec<f64> {
    adj[idx].get_or_insert_with(|| vec![0.0; n])
}

fn finish(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Tensor {
    dtype.round_all(&mut data);
    Tensor::raw(shape, data, dtype)
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `(output shape, outer, axis length, inner)` for a reduction.
fn reduce_geometry(shape: &[usize], axis: Option<usize>) -> Result<(Vec<usize>, usize, usize, usize)> {
    match axis {
        None => Ok((Vec::new(), 1, shape.iter().product(), 1)),
        Some(ax) if ax < shape.len() => {
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out = shape.to_vec();
            out.remove(ax);
            Ok((out, outer, shape[ax], inner))
        }
        Some(ax) => Err(Error::InvalidAxis {
            axis: ax,
            rank: shape.len(),
        }),
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn for_param(&self, t: &Tensor) -> Option<&[f64]> {
        t.param_id().and_then(|id| self.params.get(&id)).map(Vec::as_slice)
    }

    /// Adds this pass's gradient into `t`'s gradient slot. Returns whether
    /// `t` was reached by the pass.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<bool> {
        let Some(g) = t.param_id().and_then(|id| self.params.get(&id)) else {
            return Ok(false);
        };
        t.accumulate_grad(g)?;
        Ok(true)
    }
}

/// Anything that owns named tensors, some of them trainable.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        let mut err = None;
        self.visit_params_mut(&mut |_, t| {
            if err.is_none() {
                if let Err(e) = grads.accumulate_into(t) {
                    err = Some(e);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| {
            if t.requires_grad() {
                n += t.numel();
            }
        });
        n
    }
}

/// A flat list of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamList(pub Vec<(String, Tensor)>);

impl Parameterized for ParamList {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in &self.0 {
            f(n, t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in &mut self.0 {
            f(n, t);
        }
    }
}
