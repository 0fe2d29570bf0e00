//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! a single reverse sweep visits every node once.

use crate::error::{ensure, Error, Result};
use crate::linalg;
use crate::tensor::{Precision, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBroadcast(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Cos(Var),
    Abs(Var),
    /// Pass-through mask recorded on the forward pass.
    Clamp(Var, Vec<bool>),
    Sum(Var),
    L1Norm(Var),
    L2Norm(Var),
    Inverse(Var),
    Trace(Var),
    /// Row norms recorded on the forward pass.
    RowNormalize(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    OverlapAdd(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients with their global L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    grads: Vec<Tensor>,
    norm: f64,
}

impl GradVector {
    pub fn new(grads: Vec<Tensor>) -> Self {
        let norm = global_norm(&grads);
        Self { grads, norm }
    }

    pub fn from_flat(template: &[Tensor], flat: &[f64]) -> Result<Self> {
        let total: usize = template.iter().map(Tensor::len).sum();
        if total != flat.len() {
            return Err(Error::Shape(format!(
                "flat gradient has {} entries, parameters have {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let grads = template
            .iter()
            .map(|t| {
                let part = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::new(t.shape().to_vec(), part)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(grads))
    }

    /// L2 norm of the concatenation of every per-parameter gradient.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.norm.is_finite() && self.grads.iter().all(Tensor::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.grads.iter().flat_map(|t| t.data().iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    /// Every entry multiplied by `factor`; the norm is recomputed from the result.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.grads.iter().map(|t| t.map(|x| x * factor)).collect())
    }
}

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// One forward/backward computation record.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            let p = self.precision;
            value.data_mut().iter_mut().for_each(|x| *x = p.round(*x));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// A leaf that does not receive gradients (data, targets, fixed bases).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`], in registration order.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(a, b, t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(a, b, t, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(a, b, t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.unary(x, t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.unary(x, t, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let data = linalg::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.binary(a, b, t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let t = Tensor::matrix(c, r, linalg::transpose(r, c, self.value(x).data()))?;
        Ok(self.unary(x, t, Op::Transpose(x)))
    }

    /// `x + 1·bᵀ`: adds the vector `b` to every row of the matrix `x`.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(b).len() != c {
            return Err(Error::Shape(format!(
                "row broadcast: {c} columns vs bias of {}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::matrix(r, c, data)?;
        Ok(self.binary(x, b, t, Op::AddRowBroadcast(x, b)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.unary(x, t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.unary(x, t, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.unary(x, t, Op::Log(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::cos);
        self.unary(x, t, Op::Cos(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.unary(x, t, Op::Abs(x))
    }

    /// Elementwise truncation `min(max(x, lo), hi)` with per-element bounds.
    pub fn clamp(&mut self, x: Var, lo: &Tensor, hi: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        same_shape(xv, lo, "clamp lower bound")?;
        same_shape(xv, hi, "clamp upper bound")?;
        let mut pass = Vec::with_capacity(xv.len());
        let data = xv
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&v, (&a, &b))| {
                let out = v.max(a).min(b);
                pass.push(v >= a && v <= b);
                out
            })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, t, Op::Clamp(x, pass)))
    }

    /// Clamp with the same scalar bounds everywhere.
    pub fn clamp_scalar(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        self.clamp(x, &Tensor::full(&shape, lo), &Tensor::full(&shape, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.unary(x, t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        self.unary(x, t, Op::L1Norm(x))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).norm_l2());
        self.unary(x, t, Op::L2Norm(x))
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        Ok(self.sum(sq))
    }

    /// Matrix inverse, ridge-regularized for ill-conditioned inputs
    /// (see [`linalg::inverse_regularized`]).
    pub fn inverse(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r != c {
            return Err(Error::Shape(format!("inverse of a {r}x{c} matrix")));
        }
        let (inv, _) = linalg::inverse_regularized(r, self.value(x).data())?;
        let t = Tensor::matrix(r, r, inv)?;
        Ok(self.unary(x, t, Op::Inverse(x)))
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r != c {
            return Err(Error::Shape(format!("trace of a {r}x{c} matrix")));
        }
        let v = self.value(x);
        let t = Tensor::scalar((0..r).map(|i| v.at2(i, i)).sum());
        Ok(self.unary(x, t, Op::Trace(x)))
    }

    /// Divides every row by its L2 norm. Zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in data.chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let t = Tensor::matrix(r, c, data)?;
        Ok(self.unary(x, t, Op::RowNormalize(x, norms)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        ensure(!xs.is_empty(), || "concat of nothing".into())?;
        let (_, c) = self.value(xs[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, cx) = self.value(x).dims2()?;
            if cx != c {
                return Err(Error::Shape(format!("concat_rows: {cx} vs {c} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let ng = xs.iter().any(|x| self.nodes[x.0].needs_grad);
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        ensure(!xs.is_empty(), || "concat of nothing".into())?;
        let (r, _) = self.value(xs[0]).dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, c) = self.value(x).dims2()?;
            if rx != r {
                return Err(Error::Shape(format!("concat_cols: {rx} vs {r} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[row * w..(row + 1) * w]);
            }
        }
        let ng = xs.iter().any(|x| self.nodes[x.0].needs_grad);
        let t = Tensor::matrix(r, total, data)?;
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start > end || end > r {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {r} rows")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::matrix(end - start, c, data)?;
        Ok(self.unary(x, t, Op::SliceRows(x, start)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start > end || end > c {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + end]);
        }
        let t = Tensor::matrix(r, w, data)?;
        Ok(self.unary(x, t, Op::SliceCols(x, start)))
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("select_rows: row {bad} of {r}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.unary(x, t, Op::SelectRows(x, rows.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.unary(x, t, Op::Reshape(x)))
    }

    /// Overlap-adds the rows of a `frames × len` matrix with the given hop,
    /// producing a vector of `(frames − 1)·hop + len` samples.
    pub fn overlap_add(&mut self, x: Var, hop: usize) -> Result<Var> {
        let (frames, len) = self.value(x).dims2()?;
        ensure(hop > 0 && frames > 0, || "overlap_add needs hop > 0 and a frame".into())?;
        let total = (frames - 1) * hop + len;
        let mut out = vec![0.0; total];
        for (f, row) in self.value(x).data().chunks(len).enumerate() {
            out[f * hop..f * hop + len]
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o += v);
        }
        let t = Tensor::vector(out);
        Ok(self.unary(x, t, Op::OverlapAdd(x, hop)))
    }

    /// Reverse sweep from a scalar node; returns gradients for every
    /// registered parameter in registration order.
    pub fn backward(&self, loss: Var) -> Result<GradVector> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "loss evaluated to {}",
                lv.data()[0]
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
            // Leaves keep their adjoint for collection below.
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }

        let grads = self
            .params
            .iter()
            .filter(|p| p.0 <= loss.0)
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                let data = adj[p.0].take().unwrap_or_else(|| vec![0.0; self.value(p).len()]);
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        // Parameters registered after the loss node cannot influence it.
        let mut grads = grads;
        for &p in self.params.iter().filter(|p| p.0 > loss.0) {
            grads.push(Tensor::zeros(self.value(p).shape()));
        }
        let gv = GradVector::new(grads);
        if !gv.is_finite() {
            return Err(Error::NonFiniteGradient(
                "reverse sweep produced NaN or infinite entries".into(),
            ));
        }
        Ok(gv)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(adj, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(adj, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => self.accumulate(adj, *x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => self.accumulate(adj, *x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked on forward");
                let (_, n) = self.value(*b).dims2().expect("checked on forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(adj, *a, |acc| {
                    linalg::gemm(false, true, m, k, n, g, bv, 1.0, acc);
                });
                self.accumulate_with(adj, *b, |acc| {
                    linalg::gemm(true, false, k, n, m, av, g, 1.0, acc);
                });
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims2().expect("matrix");
                self.accumulate(adj, *x, linalg::transpose(r, c, g));
            }
            Op::AddRowBroadcast(x, b) => {
                self.accumulate(adj, *x, g.to_vec());
                let c = self.value(*b).len();
                self.accumulate_with(adj, *b, |acc| {
                    for row in g.chunks(c) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Sigmoid(x) => self.accumulate(
                adj,
                *x,
                g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect(),
            ),
            Op::Tanh(x) => self.accumulate(
                adj,
                *x,
                g.iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect(),
            ),
            Op::Log(x) => self.accumulate(
                adj,
                *x,
                g.iter().zip(self.value(*x).data()).map(|(g, v)| g / v).collect(),
            ),
            Op::Cos(x) => self.accumulate(
                adj,
                *x,
                g.iter().zip(self.value(*x).data()).map(|(g, v)| -g * v.sin()).collect(),
            ),
            Op::Abs(x) => self.accumulate(
                adj,
                *x,
                g.iter().zip(self.value(*x).data()).map(|(g, v)| g * sign(*v)).collect(),
            ),
            Op::Clamp(x, pass) => self.accumulate(
                adj,
                *x,
                g.iter().zip(pass).map(|(g, &p)| if p { *g } else { 0.0 }).collect(),
            ),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(adj, *x, vec![g[0]; n]);
            }
            Op::L1Norm(x) => self.accumulate(
                adj,
                *x,
                self.value(*x).data().iter().map(|v| g[0] * sign(*v)).collect(),
            ),
            Op::L2Norm(x) => {
                let n = out.data()[0];
                let contrib = if n > 0.0 {
                    self.value(*x).data().iter().map(|v| g[0] * v / n).collect()
                } else {
                    vec![0.0; self.value(*x).len()]
                };
                self.accumulate(adj, *x, contrib);
            }
            Op::Inverse(x) => {
                // d(A⁻¹) = −A⁻¹·dA·A⁻¹  ⇒  Ā = −Bᵀ·Ḡ·Bᵀ with B = A⁻¹.
                let (n, _) = out.dims2().expect("square");
                let b = out.data();
                let mut tmp = vec![0.0; n * n];
                linalg::gemm(true, false, n, n, n, b, g, 0.0, &mut tmp);
                let mut res = vec![0.0; n * n];
                linalg::gemm(false, true, n, n, n, &tmp, b, 0.0, &mut res);
                res.iter_mut().for_each(|v| *v = -*v);
                self.accumulate(adj, *x, res);
            }
            Op::Trace(x) => {
                let (n, _) = self.value(*x).dims2().expect("square");
                self.accumulate_with(adj, *x, |acc| {
                    for i in 0..n {
                        acc[i * n + i] += g[0];
                    }
                });
            }
            Op::RowNormalize(x, norms) => {
                let (_, c) = out.dims2().expect("matrix");
                let y = out.data();
                self.accumulate_with(adj, *x, |acc| {
                    for (r, &n) in norms.iter().enumerate() {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        if n > 0.0 {
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                acc[r * c + j] += (gs[j] - ys[j] * dot) / n;
                            }
                        } else {
                            for j in 0..c {
                                acc[r * c + j] += gs[j];
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.accumulate(adj, x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(xs) => {
                let (r, total) = out.dims2().expect("matrix");
                let mut col = 0;
                for &x in xs {
                    let (_, w) = self.value(x).dims2().expect("matrix");
                    let mut part = Vec::with_capacity(r * w);
                    for row in 0..r {
                        part.extend_from_slice(&g[row * total + col..row * total + col + w]);
                    }
                    self.accumulate(adj, x, part);
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                let (_, c) = out.dims2().expect("matrix");
                self.accumulate_with(adj, *x, |acc| {
                    acc[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, v)| *a += v);
                });
            }
            Op::SliceCols(x, start) => {
                let (r, w) = out.dims2().expect("matrix");
                let (_, c) = self.value(*x).dims2().expect("matrix");
                self.accumulate_with(adj, *x, |acc| {
                    for row in 0..r {
                        for j in 0..w {
                            acc[row * c + start + j] += g[row * w + j];
                        }
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let (_, c) = out.dims2().expect("matrix");
                self.accumulate_with(adj, *x, |acc| {
                    for (k, &i) in rows.iter().enumerate() {
                        acc[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(adj, *x, g.to_vec()),
            Op::OverlapAdd(x, hop) => {
                let (frames, len) = self.value(*x).dims2().expect("matrix");
                let mut part = Vec::with_capacity(frames * len);
                for f in 0..frames {
                    part.extend_from_slice(&g[f * hop..f * hop + len]);
                }
                self.accumulate(adj, *x, part);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, theta: &[Tensor], h: f64) -> Result<GradVector>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    ensure(h > 0.0, || format!("finite-difference step must be positive, got {h}"))?;
    let mut probe: Vec<Tensor> = theta.to_vec();
    let mut grads = Vec::with_capacity(theta.len());
    let mut coordinate = 0;
    for ti in 0..theta.len() {
        let mut g = Vec::with_capacity(theta[ti].len());
        for j in 0..theta[ti].len() {
            let orig = theta[ti].data()[j];
            probe[ti].data_mut()[j] = orig + h;
            let fp = f(&probe)?;
            probe[ti].data_mut()[j] = orig - h;
            let fm = f(&probe)?;
            probe[ti].data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFiniteProbe { coordinate });
            }
            g.push((fp - fm) / (2.0 * h));
            coordinate += 1;
        }
        grads.push(Tensor::new(theta[ti].shape().to_vec(), g)?);
    }
    Ok(GradVector::new(grads))
}

/// Largest coordinate-wise relative error between two gradients.
///
/// Each coordinate is compared as `|a − b| / max(|a|, |b|, floor)` where
/// `floor = 1e-3 · max_j |b_j|`, so coordinates that are tiny relative to the
/// gradient's overall scale are judged against that scale instead of zero.
pub fn max_relative_error(analytic: &GradVector, reference: &GradVector) -> f64 {
    let scale = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_grad(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.param(Tensor::scalar(x));
        let y = f(&mut g, v).unwrap();
        g.backward(y).unwrap().tensors()[0].data()[0]
    }

    #[test]
    fn square_has_gradient_two_x() {
        assert_eq!(scalar_grad(|g, x| g.mul(x, x), 3.0), 6.0);
    }

    #[test]
    fn clamp_flat_region_has_zero_gradient() {
        assert_eq!(scalar_grad(|g, x| g.clamp_scalar(x, 0.0, 1.0), 2.0), 0.0);
        assert_eq!(scalar_grad(|g, x| g.clamp_scalar(x, 0.0, 1.0), 0.5), 1.0);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(v, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_forward_is_non_finite_gradient_error() {
        let mut g = Graph::new();
        let v = g.param(Tensor::scalar(-1.0));
        let y = g.log(v);
        assert!(matches!(g.backward(y), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::vector(vec![1.0, 1.0]));
        let y = g.mul(a, a).unwrap();
        let gv = g.backward(y).unwrap();
        assert_eq!(gv.tensors()[1].data(), &[0.0, 0.0]);
        assert_eq!(gv.norm(), 4.0);
        let _ = b;
    }

    #[test]
    fn fd_of_square_and_constant() {
        let fd = finite_diff_grad(|t| Ok(t[0].data()[0].powi(2)), &[Tensor::scalar(3.0)], 1e-5)
            .unwrap();
        assert!((fd.tensors()[0].data()[0] - 6.0).abs() < 1e-8);
        let fd0 = finite_diff_grad(|_| Ok(4.2), &[Tensor::vector(vec![1.0, 2.0, 3.0])], 1e-5)
            .unwrap();
        assert!(fd0.iter().all(|v| v == 0.0));
    }

    #[test]
    fn fd_reports_offending_coordinate() {
        let err = finite_diff_grad(
            |t| Ok(if t[0].data()[1] > 1.0 { f64::NAN } else { 0.0 }),
            &[Tensor::vector(vec![0.0, 1.0])],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { coordinate: 1 }));
        assert!(finite_diff_grad(|_| Ok(0.0), &[Tensor::scalar(0.0)], 0.0).is_err());
    }

    fn trace_of_inverse(t: &[Tensor]) -> Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(t[0].clone());
        let inv = g.inverse(a)?;
        let tr = g.trace(inv)?;
        g.scalar_value(tr)
    }

    #[test]
    fn trace_inverse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for i in 0..4 {
            data[i * 5] += 3.0;
        }
        let a = Tensor::matrix(4, 4, data).unwrap();
        let mut g = Graph::new();
        let p = g.param(a.clone());
        let inv = g.inverse(p).unwrap();
        let tr = g.trace(inv).unwrap();
        let analytic = g.backward(tr).unwrap();
        let fd = finite_diff_grad(trace_of_inverse, &[a], 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &fd) < 1e-5);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.param(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
            let b = g.param(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.5, 0.25, 2.0, -1.0]).unwrap());
            let m = g.matmul(a, b).unwrap();
            let s = g.sigmoid(m);
            let n = g.row_normalize(s).unwrap();
            let l = g.l2_norm(n);
            g.backward(l).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn f32_mode_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let v = g.constant(Tensor::scalar(0.1));
        let y = g.scale(v, 1.0);
        assert_eq!(g.scalar_value(y).unwrap(), 0.1f32 as f64);
    }
}
