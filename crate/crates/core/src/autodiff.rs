//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order, so node ids are a
//! valid topological order and backward is a single reverse sweep. Gradients
//! only flow into nodes that were created from at least one leaf registered
//! with `requires_grad`.
//!
//! Binary element-wise ops (`add`, `sub`, `mul`, `div`) accept a right-hand
//! side that either matches the left shape or broadcasts from `1×1`,
//! `1×cols` or `rows×1`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMean(Var),
    ColMean(Var),
    RowStd(Var),
    ColStd(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    Dot(Var, Var),
    L2Normalize(Var, f64),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GradReversal(Var, bool),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but zeros when nothing reached `v`.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation recorder. Rebuilt for every step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn bcast_kind(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<Bcast> {
    if lhs == rhs {
        Ok(Bcast::Same)
    } else if rhs == (1, 1) {
        Ok(Bcast::Scalar)
    } else if rhs == (1, lhs.1) {
        Ok(Bcast::Row)
    } else if rhs == (lhs.0, 1) {
        Ok(Bcast::Col)
    } else {
        Err(Error::shape(op, format!("cannot broadcast {rhs:?} onto {lhs:?}")))
    }
}

#[inline]
fn bcast_at(kind: Bcast, cols: usize, idx: usize) -> usize {
    match kind {
        Bcast::Same => idx,
        Bcast::Scalar => 0,
        Bcast::Row => idx % cols,
        Bcast::Col => idx / cols,
    }
}

fn binary(lhs: &Tensor, rhs: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = lhs.cols();
    let r = rhs.data();
    let data = lhs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| f(a, r[bcast_at(kind, cols, i)]))
        .collect();
    Tensor::new(lhs.rows(), lhs.cols(), data).expect("shape preserved")
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_to(kind: Bcast, full: &Tensor, shape: (usize, usize)) -> Tensor {
    match kind {
        Bcast::Same => full.clone(),
        _ => {
            let mut out = Tensor::zeros(shape.0, shape.1);
            let cols = full.cols();
            let o = out.data_mut();
            for (i, &g) in full.data().iter().enumerate() {
                o[bcast_at(kind, cols, i)] += g;
            }
            out
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let kind = bcast_kind(name, self.shape(a), self.shape(b))?;
        let value = binary(self.value(a), self.value(b), kind, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, mk(a, b, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries, as 1×1.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Per-row sums, `rows×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::from_fn(t.rows(), 1, |r, _| t.row_slice(r).iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    /// Per-row means, `rows×1`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols() as f64;
        let value = Tensor::from_fn(t.rows(), 1, |r, _| t.row_slice(r).iter().sum::<f64>() / n);
        let rg = self.rg(a);
        self.push(value, Op::RowMean(a), rg)
    }

    /// Per-column means, `1×cols`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let value = col_means(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::ColMean(a), rg)
    }

    /// Per-row population standard deviation `sqrt(var + eps)`, `rows×1`.
    pub fn row_std(&mut self, a: Var, eps: f64) -> Result<Var> {
        check_eps("row_std", eps)?;
        let t = self.value(a);
        let n = t.cols() as f64;
        let value = Tensor::from_fn(t.rows(), 1, |r, _| {
            let row = t.row_slice(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            (var + eps).sqrt()
        });
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowStd(a), rg))
    }

    /// Per-column population standard deviation `sqrt(var + eps)`, `1×cols`.
    pub fn col_std(&mut self, a: Var, eps: f64) -> Result<Var> {
        check_eps("col_std", eps)?;
        let t = self.value(a);
        let mu = col_means(t);
        let n = t.rows() as f64;
        let mut var = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (c, x) in t.row_slice(r).iter().enumerate() {
                let d = x - mu.data()[c];
                var[c] += d * d;
            }
        }
        let value = Tensor::row(var.into_iter().map(|v| (v / n + eps).sqrt()).collect());
        let rg = self.rg(a);
        Ok(self.push(value, Op::ColStd(a), rg))
    }

    /// Softmax along each row, stabilised by max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    /// Log-softmax along each row.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let lse = log_sum_exp(row);
            for (c, x) in row.iter().enumerate() {
                out.set(r, c, x - lse);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Sum of the element-wise product of two equally shaped tensors, as 1×1.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let value = Tensor::scalar(ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Dot(a, b), rg))
    }

    /// Scales each row to unit length: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        check_eps("l2_normalize", eps)?;
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let norm = row_norm(t.row_slice(r), eps);
            for c in 0..t.cols() {
                out.set(r, c, t.get(r, c) / norm);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2Normalize(a, eps), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gradient reversal: identity forward; when `active`, the backward
    /// pass multiplies the upstream gradient by exactly −1. Inactive, it is
    /// the identity both ways.
    pub fn gradient_reversal(&mut self, a: Var, active: bool) -> Var {
        let value = self.value(a).clone();
        let rg = self.rg(a);
        self.push(value, Op::GradReversal(a, active), rg)
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b, k) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let gb = reduce_to(*k, g, self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b, k) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let gb = reduce_to(*k, &g.map(|x| -x), self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, k) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, binary(g, tb, *k, |gi, bi| gi * bi));
                }
                if self.rg(*b) {
                    let full = g.zip_map(ta, |gi, ai| gi * ai)?;
                    self.accumulate(grads, *b, reduce_to(*k, &full, tb.shape()));
                }
            }
            Op::Div(a, b, k) => {
                let tb = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, binary(g, tb, *k, |gi, bi| gi / bi));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = g.zip_map(y, |gi, yi| -gi * yi)?;
                    let full = binary(&gy, tb, *k, |v, bi| v / bi);
                    self.accumulate(grads, *b, reduce_to(*k, &full, tb.shape()));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gi, xi| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let v = g.data()[0] / (r * c) as f64;
                self.accumulate(grads, *a, Tensor::filled(r, c, v));
            }
            Op::RowSum(a) | Op::RowMean(a) => {
                let (r, c) = self.shape(*a);
                let div = if matches!(node.op, Op::RowMean(_)) { c as f64 } else { 1.0 };
                let ga = Tensor::from_fn(r, c, |i, _| g.data()[i] / div);
                self.accumulate(grads, *a, ga);
            }
            Op::ColMean(a) => {
                let (r, c) = self.shape(*a);
                let ga = Tensor::from_fn(r, c, |_, j| g.data()[j] / r as f64);
                self.accumulate(grads, *a, ga);
            }
            Op::RowStd(a) => {
                // d sqrt(var + eps)/dx_j = (x_j - mu) / (n * std)
                let x = self.value(*a);
                let n = x.cols() as f64;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = x.row_slice(r);
                    let mu = row.iter().sum::<f64>() / n;
                    let k = g.data()[r] / (n * y.data()[r]);
                    for (c, xi) in row.iter().enumerate() {
                        ga.set(r, c, k * (xi - mu));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ColStd(a) => {
                let x = self.value(*a);
                let mu = col_means(x);
                let n = x.rows() as f64;
                let ga = Tensor::from_fn(x.rows(), x.cols(), |r, c| {
                    g.data()[c] * (x.get(r, c) - mu.data()[c]) / (n * y.data()[c])
                });
                self.accumulate(grads, *a, ga);
            }
            Op::RowSoftmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, yr[c] * (gr[c] - inner));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, gr[c] - yr[c].exp() * gsum);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Dot(a, b) => {
                let s = g.data()[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, self.value(*b).map(|v| v * s));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).map(|v| v * s));
                }
            }
            Op::L2Normalize(a, eps) => {
                // dx = (g - y (y·g)) / norm
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = row_norm(x.row_slice(r), *eps);
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..x.cols() {
                        ga.set(r, c, (gr[c] - yr[c] * yg) / norm);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, rows)?);
                    }
                    offset += rows;
                }
            }
            Op::GradReversal(a, active) => {
                let ga = if *active { g.map(|x| -x) } else { g.clone() };
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

fn check_eps(op: &'static str, eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("{op}: eps must be > 0, got {eps}")))
    }
}

fn row_norm(row: &[f64], eps: f64) -> f64 {
    (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt()
}

fn col_means(t: &Tensor) -> Tensor {
    let mut sums = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (s, x) in sums.iter_mut().zip(t.row_slice(r)) {
            *s += x;
        }
    }
    let n = t.rows() as f64;
    Tensor::row(sums.into_iter().map(|s| s / n).collect())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        let row = t.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            out.set(r, c, e / z);
        }
    }
    out
}

/// Compares analytic gradients from `loss_fn` against central finite
/// differences and returns the worst relative error over every coordinate
/// of every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.scalar_value(loss)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let v = tape.scalar_value(loss)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {v}")));
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p.shape());
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
