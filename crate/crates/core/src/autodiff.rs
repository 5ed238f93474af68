//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep. Leaves
//! created with [`Tape::leaf`] receive gradients; constants never do.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Square,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReductionKind {
    Sum,
    Mean,
    RowL2Norm,
    FrobeniusSq,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Square(Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    RowL2Norm(Var),
    FrobeniusSq(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    DivRows(Var, Var),
    ClampMin(Var, f64),
    Reshape(Var),
    SliceRows(Var, usize),
    Conv3x3(Var, Var),
    GlobalAvgPool(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf of the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    /// Gradient for `v`; panics if `v` is not a leaf of the tape.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.grads
            .get(&v)
            .unwrap_or_else(|| panic!("{v:?} is not a leaf on this tape"))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }
}

/// A single-threaded recording of tensor operations.
#[derive(Debug, Default, Clone)]
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// Copies the current value of `v` into a constant; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, inputs: &[Var], value: Tensor) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(op, value, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), &[a, b], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push_op(Op::Transpose(a), &[a], out))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            ElementwiseKind::Add => self.add(args[0], args[1]),
            ElementwiseKind::Sub => self.sub(args[0], args[1]),
            ElementwiseKind::Mul => self.mul(args[0], args[1]),
            ElementwiseKind::Relu => Ok(self.relu(args[0])),
            ElementwiseKind::Square => Ok(self.square(args[0])),
            ElementwiseKind::Scale(s) => Ok(self.scale(args[0], s)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_op(Op::Add(a, b), &[a, b], out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_op(Op::Sub(a, b), &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_op(Op::Mul(a, b), &[a, b], out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op(Op::Relu(a), &[a], out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push_op(Op::Square(a), &[a], out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_op(Op::Scale(a, s), &[a], out)
    }

    /// Adds `bias[c]` to every element whose axis-1 index is `c` (`[B, C]` or `[B, C, H, W]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if x.rank() < 2 || b.rank() != 1 || b.len() != x.shape()[1] {
            return Err(Error::dim("add_bias", x.shape(), b.shape()));
        }
        let channels = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / inner) % channels];
        }
        Ok(self.push_op(Op::AddBias(a, bias), &[a, bias], out))
    }

    pub fn reduce(&mut self, kind: ReductionKind, a: Var) -> Result<Var> {
        match kind {
            ReductionKind::Sum => Ok(self.sum(a)),
            ReductionKind::Mean => Ok(self.mean(a)),
            ReductionKind::RowL2Norm => self.row_l2_norm(a),
            ReductionKind::FrobeniusSq => Ok(self.frobenius_sq(a)),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(Op::Sum(a), &[a], out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push_op(Op::Mean(a), &[a], out)
    }

    /// Euclidean norm of every row of a matrix, shape `[B]`.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::Contract(format!(
                "row_l2_norm needs a matrix, got {:?}",
                x.shape()
            )));
        }
        let norms = (0..x.rows())
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_vec(&[x.rows()], norms);
        Ok(self.push_op(Op::RowL2Norm(a), &[a], out))
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().map(|v| v * v).sum());
        self.push_op(Op::FrobeniusSq(a), &[a], out)
    }

    fn check_logits(&self, a: Var, op: &'static str) -> Result<()> {
        let x = self.value(a);
        if x.rank() != 2 || x.shape()[1] < 2 {
            return Err(Error::Contract(format!(
                "{op} needs [B, K] with K >= 2, got {:?}",
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::Numeric(op));
        }
        Ok(())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_logits(a, "softmax")?;
        let out = softmax_rows(self.value(a));
        Ok(self.push_op(Op::Softmax(a), &[a], out))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_logits(a, "log_softmax")?;
        let x = self.value(a);
        let k = x.shape()[1];
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push_op(Op::LogSoftmax(a), &[a], out))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).all_finite() {
            return Err(Error::Numeric("sigmoid"));
        }
        let out = self.value(a).map(sigmoid);
        Ok(self.push_op(Op::Sigmoid(a), &[a], out))
    }

    /// `ln(sigmoid(x))` without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).all_finite() {
            return Err(Error::Numeric("log_sigmoid"));
        }
        let out = self.value(a).map(|x| x.min(0.0) - (-x.abs()).exp().ln_1p());
        Ok(self.push_op(Op::LogSigmoid(a), &[a], out))
    }

    /// Divides row `i` of a `[B, N]` matrix by `d[i]`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Result<Var> {
        let (x, dv) = (self.value(a), self.value(d));
        if x.rank() != 2 || dv.shape() != [x.rows()] {
            return Err(Error::dim("div_rows", x.shape(), dv.shape()));
        }
        let n = x.shape()[1];
        let mut out = x.clone();
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            let s = dv.data()[i];
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push_op(Op::DivRows(a, d), &[a, d], out))
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push_op(Op::ClampMin(a, floor), &[a], out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_op(Op::Reshape(a), &[a], out))
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.rows() {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of range for {:?}",
                x.shape()
            )));
        }
        let w = x.row_len();
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, x.data()[start * w..end * w].to_vec())?;
        Ok(self.push_op(Op::SliceRows(a, start), &[a], out))
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x: [B, Ci, H, W]`, `w: [Co, Ci, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 4
            || wv.rank() != 4
            || wv.shape()[1] != xv.shape()[1]
            || wv.shape()[2..] != [3, 3]
        {
            return Err(Error::dim("conv3x3", xv.shape(), wv.shape()));
        }
        let out = conv3x3_forward(xv, wv);
        Ok(self.push_op(Op::Conv3x3(x, w), &[x, w], out))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::Contract(format!(
                "global_avg_pool needs [B, C, H, W], got {:?}",
                xv.shape()
            )));
        }
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let hw = xv.shape()[2] * xv.shape()[3];
        let data = xv
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_vec(&[b, c], data);
        Ok(self.push_op(Op::GlobalAvgPool(x), &[x], out))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every leaf.
    pub fn backward(&self, root: Var) -> Result<GradMap> {
        let rv = self.value(root);
        if rv.shape() != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar root of shape [1], got {:?}",
                rv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
        }
        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                let g = adj[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(Var(idx), g);
            }
        }
        // leaves recorded after the root cannot influence it
        for (idx, node) in self.nodes.iter().enumerate().skip(root.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                grads.insert(Var(idx), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradMap { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
    ) -> Result<()> {
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.nodes[a.0].needs_grad {
                    let da = g.matmul(&bv.transpose()?)?;
                    self.accumulate(adj, a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = av.transpose()?.matmul(g)?;
                    self.accumulate(adj, b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(adj, a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(b), "mul", |x, y| x * y)?;
                let db = g.zip_map(self.value(a), "mul", |x, y| x * y)?;
                self.accumulate(adj, a, da);
                self.accumulate(adj, b, db);
            }
            Op::Relu(a) => {
                let da = g.zip_map(self.value(a), "relu", |d, x| if x > 0.0 { d } else { 0.0 })?;
                self.accumulate(adj, a, da);
            }
            Op::Square(a) => {
                let da = g.zip_map(self.value(a), "square", |d, x| 2.0 * x * d)?;
                self.accumulate(adj, a, da);
            }
            Op::Scale(a, s) => self.accumulate(adj, a, g.map(|d| d * s)),
            Op::AddBias(a, b) => {
                let bv = self.value(b);
                let channels = bv.len();
                let shape = self.shape(a);
                let inner: usize = shape[2..].iter().product();
                let mut db = vec![0.0; channels];
                for (i, d) in g.data().iter().enumerate() {
                    db[(i / inner) % channels] += d;
                }
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, Tensor::from_vec(&[channels], db));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(adj, a, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).len() as f64;
                self.accumulate(adj, a, Tensor::filled(&shape, g.item() / n));
            }
            Op::RowL2Norm(a) => {
                let x = self.value(a);
                let n = x.shape()[1];
                let mut da = x.clone();
                for (i, row) in da.data_mut().chunks_mut(n).enumerate() {
                    let norm = out.data()[i];
                    let coef = if norm > 0.0 { g.data()[i] / norm } else { 0.0 };
                    row.iter_mut().for_each(|v| *v *= coef);
                }
                self.accumulate(adj, a, da);
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.item();
                self.accumulate(adj, a, self.value(a).map(|x| s * x));
            }
            Op::Softmax(a) => {
                let k = out.shape()[1];
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    drow.iter_mut().zip(yrow).for_each(|(d, y)| *d = y * (*d - dot));
                }
                self.accumulate(adj, a, da);
            }
            Op::LogSoftmax(a) => {
                let k = out.shape()[1];
                let mut da = g.clone();
                for (drow, lrow) in da.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let total: f64 = drow.iter().sum();
                    drow.iter_mut()
                        .zip(lrow)
                        .for_each(|(d, l)| *d -= l.exp() * total);
                }
                self.accumulate(adj, a, da);
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(out, "sigmoid", |d, s| d * s * (1.0 - s))?;
                self.accumulate(adj, a, da);
            }
            Op::LogSigmoid(a) => {
                let da = g.zip_map(self.value(a), "log_sigmoid", |d, x| d * sigmoid(-x))?;
                self.accumulate(adj, a, da);
            }
            Op::DivRows(a, d) => {
                let (x, dv) = (self.value(a), self.value(d));
                let n = x.shape()[1];
                let mut da = g.clone();
                let mut dd = vec![0.0; dv.len()];
                for (i, row) in da.data_mut().chunks_mut(n).enumerate() {
                    let s = dv.data()[i];
                    let xrow = x.row(i);
                    dd[i] = -row.iter().zip(xrow).map(|(gv, xv)| gv * xv).sum::<f64>() / (s * s);
                    row.iter_mut().for_each(|v| *v /= s);
                }
                self.accumulate(adj, a, da);
                self.accumulate(adj, d, Tensor::from_vec(&[dv.len()], dd));
            }
            Op::ClampMin(a, floor) => {
                let da = g.zip_map(self.value(a), "clamp_min", |d, x| if x > floor { d } else { 0.0 })?;
                self.accumulate(adj, a, da);
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(adj, a, g.reshape(&shape)?);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(a);
                let w = x.row_len();
                let mut da = Tensor::zeros(x.shape());
                da.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                self.accumulate(adj, a, da);
            }
            Op::Conv3x3(x, w) => {
                let (xv, wv) = (self.value(x), self.value(w));
                if self.nodes[x.0].needs_grad {
                    self.accumulate(adj, x, conv3x3_grad_input(g, wv, xv.shape()));
                }
                if self.nodes[w.0].needs_grad {
                    self.accumulate(adj, w, conv3x3_grad_weight(g, xv, wv.shape()));
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(x).to_vec();
                let hw = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d / hw as f64, hw));
                }
                self.accumulate(adj, x, Tensor::from_vec(&shape, dx));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax on plain values, used by both the tape and evaluation code.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let k = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn conv3x3_forward(x: &Tensor, w: &Tensor) -> Tensor {
    let [b, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co = w.shape()[0];
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; b * co * h * wd];
    for n in 0..b {
        for o in 0..co {
            let oplane = &mut out[((n * co + o) * h) * wd..((n * co + o) * h + h) * wd];
            for c in 0..ci {
                let iplane = &xd[((n * ci + c) * h) * wd..((n * ci + c) * h + h) * wd];
                let kern = &wdat[(o * ci + c) * 9..(o * ci + c) * 9 + 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = kern[ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[sy as usize * wd..(sy as usize + 1) * wd];
                            let orow = &mut oplane[y * wd..(y + 1) * wd];
                            let (x0, x1) = col_range(kx, wd);
                            for xx in x0..x1 {
                                orow[xx] += kv * irow[xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, co, h, wd], out)
}

// Output columns `xx` for which `xx + kx - 1` is a valid input column.
fn col_range(kx: usize, wd: usize) -> (usize, usize) {
    match kx {
        0 => (1, wd),
        1 => (0, wd),
        _ => (0, wd - 1),
    }
}

fn conv3x3_grad_input(g: &Tensor, w: &Tensor, xshape: &[usize]) -> Tensor {
    let [b, ci, h, wd] = [xshape[0], xshape[1], xshape[2], xshape[3]];
    let co = w.shape()[0];
    let (gd, wdat) = (g.data(), w.data());
    let mut dx = vec![0.0; b * ci * h * wd];
    for n in 0..b {
        for o in 0..co {
            let gplane = &gd[((n * co + o) * h) * wd..((n * co + o) * h + h) * wd];
            for c in 0..ci {
                let dplane = &mut dx[((n * ci + c) * h) * wd..((n * ci + c) * h + h) * wd];
                let kern = &wdat[(o * ci + c) * 9..(o * ci + c) * 9 + 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = kern[ky * 3 + kx];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let grow = &gplane[y * wd..(y + 1) * wd];
                            let drow = &mut dplane[sy as usize * wd..(sy as usize + 1) * wd];
                            let (x0, x1) = col_range(kx, wd);
                            for xx in x0..x1 {
                                drow[xx + kx - 1] += kv * grow[xx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(xshape, dx)
}

fn conv3x3_grad_weight(g: &Tensor, x: &Tensor, wshape: &[usize]) -> Tensor {
    let [b, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co = wshape[0];
    let (gd, xd) = (g.data(), x.data());
    let mut dw = vec![0.0; co * ci * 9];
    for n in 0..b {
        for o in 0..co {
            let gplane = &gd[((n * co + o) * h) * wd..((n * co + o) * h + h) * wd];
            for c in 0..ci {
                let iplane = &xd[((n * ci + c) * h) * wd..((n * ci + c) * h + h) * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let grow = &gplane[y * wd..(y + 1) * wd];
                            let irow = &iplane[sy as usize * wd..(sy as usize + 1) * wd];
                            let (x0, x1) = col_range(kx, wd);
                            for xx in x0..x1 {
                                acc += grow[xx] * irow[xx + kx - 1];
                            }
                        }
                        dw[(o * ci + c) * 9 + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(wshape, dw)
}

/// Compares [`Tape::backward`] against central finite differences.
///
/// `f` builds a scalar from the leaf it is given. Returns the largest
/// coordinate-wise `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let analytic = tape.backward(root)?.wrt(leaf).clone();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let ones = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        let z = Tensor::zeros(&[2, 3]).matmul(&random(&[3, 2], &mut ChaCha8Rng::seed_from_u64(0)));
        assert_eq!(z.unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 3f64.ln()], &[1000.0, 0.0]]));
        let y = t.softmax(x).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
        assert!(v[4].is_finite() && (v[4] - 1.0).abs() < 1e-15 && v[5] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]]));
        assert!(matches!(t.softmax(x), Err(Error::Numeric(_))));
        let single = t.constant(Tensor::from_rows(&[&[1.0]]));
        assert!(t.softmax(single).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(&[2], vec![-1.0, 2.0]));
        let r = t.elementwise(ElementwiseKind::Relu, &[a]).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);
        let b = t.constant(Tensor::scalar(3.0));
        let s = t.elementwise(ElementwiseKind::Square, &[b]).unwrap();
        assert_eq!(t.value(s).data(), &[9.0]);
        let c = t.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let h = t.elementwise(ElementwiseKind::Scale(0.5), &[c]).unwrap();
        assert_eq!(t.value(h).data(), &[0.5, 1.0]);
        let bad = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reduction_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::filled(&[2, 2], 1.0));
        let f = t.reduce(ReductionKind::FrobeniusSq, a).unwrap();
        assert_eq!(t.value(f).item(), 4.0);
        let b = t.constant(Tensor::from_rows(&[&[3.0, 4.0]]));
        let n = t.reduce(ReductionKind::RowL2Norm, b).unwrap();
        assert_eq!(t.value(n).data(), &[5.0]);
        let c = t.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let m = t.reduce(ReductionKind::Mean, c).unwrap();
        assert_eq!(t.value(m).item(), 2.0);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[3], vec![0.3, -2.0, 5.0]));
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let f = t.frobenius_sq(x);
        assert_eq!(t.backward(f).unwrap().wrt(x).data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn row_norm_gradient_at_zero_row_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[&[0.0, 0.0], &[3.0, 4.0]]));
        let n = t.row_l2_norm(x).unwrap();
        let s = t.sum(n);
        let g = t.backward(s).unwrap();
        let got = g.wrt(x).data();
        assert_eq!(&got[..2], &[0.0, 0.0]);
        assert!((got[2] - 0.6).abs() < 1e-15 && (got[3] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constants_and_detached_values_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let d = t.detach(x);
        let p = t.mul(x, d).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        // only the non-detached factor contributes
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn finite_difference_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[5], &mut rng);
        let lin = finite_difference_check(
            |t, v| {
                let s = t.sum(v);
                Ok(t.scale(s, 3.0))
            },
            &x,
            1e-5,
        );
        assert!(lin.unwrap() <= 1e-9);
        let constant = finite_difference_check(
            |t, v| {
                let z = t.scale(v, 0.0);
                let c = t.constant(Tensor::from_vec(&[5], vec![1.0; 5]));
                let s = t.add(z, c)?;
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        );
        assert_eq!(constant.unwrap(), 0.0);
    }

    #[test]
    fn mean_square_matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            let b2 = b.clone();
            let err = finite_difference_check(
                move |t, v| {
                    let bv = t.constant(b2.clone());
                    let m = t.matmul(v, bv)?;
                    let s = t.square(m);
                    Ok(t.mean(s))
                },
                &a,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 3], &mut rng);
        let run = || {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let vt = t.transpose(v).unwrap();
            let g = t.matmul(v, vt).unwrap();
            let n = t.row_l2_norm(g).unwrap();
            let r = t.div_rows(g, n).unwrap();
            let f = t.frobenius_sq(r);
            (t.value(f).clone(), t.backward(f).unwrap())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 2, 4, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv3x3(xv, wv).unwrap();
        let got = t.value(y);
        let at = |n: usize, c: usize, yy: isize, xx: isize| -> f64 {
            if yy < 0 || xx < 0 || yy >= 4 || xx >= 5 {
                0.0
            } else {
                x.data()[((n * 2 + c) * 4 + yy as usize) * 5 + xx as usize]
            }
        };
        for n in 0..2 {
            for o in 0..3 {
                for yy in 0..4 {
                    for xx in 0..5 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * at(n, c, yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                }
                            }
                        }
                        let v = got.data()[((n * 3 + o) * 4 + yy) * 5 + xx];
                        assert!((v - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
