//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation as a node holding its output. Parameters are read straight
//! from the borrowed [`ParamStore`]; [`Graph::backward`] accumulates their gradients into a
//! [`Gradients`] buffer so several graphs (one per sequence in a batch) can share one update.

use dyadmotion_core::Scalar;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Array2<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    MeanRows(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>, Array2<T>),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let value = half * x * (T::one() + th);
    let d_inner = c * (T::one() + T::lit(3.0) * k * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * d_inner;
    (value, deriv)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a.view(),
            Value::Param(id) => self.params.value(*id).view(),
        }
    }

    /// The single entry of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on a non-scalar node");
        a[[0, 0]]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).to_owned();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) - &self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let out = &self.value(a) + &self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by the `1 × n` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a single row");
        let out = &self.value(a) * &self.value(row);
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax. Where `mask` is false the output is exactly zero; fully masked rows are
    /// all zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Var {
        let x = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.dim(), x.dim(), "mask shape");
        }
        let mut out = Array2::zeros(x.dim());
        for (i, (row, mut orow)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            orow.mapv_inplace(|e| e / total);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::lit_usize(x.ncols());
        let mut out = x.to_owned();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv_std = T::one() / (var + T::lit(LN_EPS)).sqrt();
            row.mapv_inplace(|v| v * inv_std);
            inv.push(inv_std);
        }
        self.push(out, Op::LayerNorm(a, inv), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    /// Row `i` of the output is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((index.len(), x.ncols()));
        for (mut row, idx) in out.rows_mut().into_iter().zip(&index) {
            if let Some(i) = *idx {
                row.assign(&x.row(i));
            }
        }
        self.push(out, Op::Gather(a, index), &[a])
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = x.mean_axis(Axis(0)).expect("mean_rows of an empty matrix").insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Mean squared difference over all entries, as a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dim(), y.dim(), "mse shape mismatch");
        let n = T::lit_usize(x.len());
        let total = Zip::from(&x).and(&y).fold(T::zero(), |acc, &p, &q| acc + (p - q) * (p - q));
        let out = Array2::from_elem((1, 1), total / n);
        self.push(out, Op::Mse(a, b), &[a, b])
    }

    /// Mean over rows of `logsumexp(row) − row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "cross_entropy: one target per row");
        let mut probs = Array2::zeros(x.dim());
        let mut total = T::zero();
        for ((row, mut prow), &t) in x.rows().into_iter().zip(probs.rows_mut()).zip(&targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (p, &v) in prow.iter_mut().zip(row.iter()) {
                *p = (v - max).exp();
                z += *p;
            }
            prow.mapv_inplace(|p| p / z);
            total += z.ln() + max - row[t];
        }
        let out = Array2::from_elem((1, 1), total / T::lit_usize(targets.len()));
        self.push(out, Op::CrossEntropy(logits, targets, probs), &[logits])
    }

    /// Accumulates `d loss / d param` into `grads` for every parameter reachable from `loss`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut adj: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, g: Array2<T>, adj: &mut Vec<Option<Array2<T>>>| {
                if !self.needs(v) {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        grads.accumulate(id, &dy);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, dy.dot(&self.value(*b).t()), &mut adj);
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).t().dot(&dy), &mut adj);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        send(*a, dy.dot(&self.value(*b)), &mut adj);
                    }
                    if self.needs(*b) {
                        send(*b, dy.t().dot(&self.value(*a)), &mut adj);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut adj);
                    send(*b, dy, &mut adj);
                }
                Op::Sub(a, b) => {
                    send(*b, dy.mapv(|v| -v), &mut adj);
                    send(*a, dy, &mut adj);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        send(*a, &dy * &self.value(*b), &mut adj);
                    }
                    if self.needs(*b) {
                        send(*b, &dy * &self.value(*a), &mut adj);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        send(*row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut adj);
                    }
                    send(*a, dy, &mut adj);
                }
                Op::MulRow(a, row) => {
                    if self.needs(*row) {
                        let g = (&dy * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(*row, g, &mut adj);
                    }
                    if self.needs(*a) {
                        send(*a, &dy * &self.value(*row), &mut adj);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    send(*a, dy.mapv(|v| v * c), &mut adj);
                }
                Op::Relu(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(&self.value(*a)).for_each(|g, &x| {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    send(*a, g, &mut adj);
                }
                Op::Gelu(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(&self.value(*a)).for_each(|g, &x| *g *= gelu_parts(x).1);
                    send(*a, g, &mut adj);
                }
                Op::Silu(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(&self.value(*a)).for_each(|g, &x| {
                        let s = sigmoid(x);
                        *g *= s * (T::one() + x * (T::one() - s));
                    });
                    send(*a, g, &mut adj);
                }
                Op::Tanh(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(&self.value(Var(i))).for_each(|g, &y| *g *= T::one() - y * y);
                    send(*a, g, &mut adj);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut g = &dy * &y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|g, &y| *g -= y * dot);
                    }
                    send(*a, g, &mut adj);
                }
                Op::LayerNorm(a, inv) => {
                    let y = self.value(Var(i));
                    let n = T::lit_usize(y.ncols());
                    let mut g = dy;
                    for ((mut grow, yrow), &s) in g.rows_mut().into_iter().zip(y.rows()).zip(inv) {
                        let mean_g = grow.sum() / n;
                        let mean_gy = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                        Zip::from(&mut grow).and(&yrow).for_each(|g, &y| *g = s * (*g - mean_g - y * mean_gy));
                    }
                    send(*a, g, &mut adj);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.needs(p) {
                            send(p, dy.slice(s![.., offset..offset + w]).to_owned(), &mut adj);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        if self.needs(p) {
                            send(p, dy.slice(s![offset..offset + h, ..]).to_owned(), &mut adj);
                        }
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    send(*a, g, &mut adj);
                }
                Op::SliceRows(a, start) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    send(*a, g, &mut adj);
                }
                Op::Gather(a, index) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    for (row, idx) in dy.rows().into_iter().zip(index) {
                        if let Some(j) = *idx {
                            let mut target = g.row_mut(j);
                            target += &row;
                        }
                    }
                    send(*a, g, &mut adj);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let scale = T::one() / T::lit_usize(rows);
                    let row = dy.mapv(|v| v * scale);
                    let g = row.broadcast((rows, row.ncols())).expect("broadcast").to_owned();
                    send(*a, g, &mut adj);
                }
                Op::Sum(a) => {
                    let d = dy[[0, 0]];
                    send(*a, Array2::from_elem(self.value(*a).dim(), d), &mut adj);
                }
                Op::Mse(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let c = dy[[0, 0]] * T::lit(2.0) / T::lit_usize(x.len());
                    let diff = (&x - &y).mapv(|v| v * c);
                    if self.needs(*b) {
                        send(*b, diff.mapv(|v| -v), &mut adj);
                    }
                    send(*a, diff, &mut adj);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let c = dy[[0, 0]] / T::lit_usize(targets.len());
                    let mut g = probs.clone();
                    for (mut row, &t) in g.rows_mut().into_iter().zip(targets) {
                        row[t] -= T::one();
                    }
                    g.mapv_inplace(|v| v * c);
                    send(*a, g, &mut adj);
                }
            }
        }
    }
}

/// `true` where key `j` may be attended from query `i`, i.e. `j ≤ i`.
pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i)
}

/// `true` where `|query_frames[i] − key_frames[j]| ≤ band`.
pub fn band_mask(query_frames: &[usize], key_frames: &[usize], band: usize) -> Array2<bool> {
    Array2::from_shape_fn((query_frames.len(), key_frames.len()), |(i, j)| {
        query_frames[i].abs_diff(key_frames[j]) <= band
    })
}

/// Sinusoidal embedding of real-valued positions, `positions.len() × dim`.
pub fn sinusoidal<T: Scalar>(positions: &[f64], dim: usize) -> Array2<T> {
    let half = dim / 2;
    Array2::from_shape_fn((positions.len(), dim), |(i, j)| {
        let k = j % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let angle = positions[i] * freq;
        T::lit(if j < half { angle.sin() } else { angle.cos() })
    })
}
