//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes. Every
//! operation the models need (dense algebra, row-wise normalizations, sparse
//! row mixing, segment max-pooling, rotary rotations, fused losses) has a
//! hand-written vector-Jacobian product. Batching is done by building one
//! graph per sample and summing parameter gradients.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamSet};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse rows: output row `i` is `Σ weights[k] · input[indices[k]]`
/// for `k` in `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMix {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RowMix {
    pub fn from_rows(rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (i, w) in row {
                indices.push(i);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self { offsets, indices, weights }
    }

    /// Uniform average over each index group.
    pub fn means(groups: &[Vec<usize>]) -> Self {
        Self::from_rows(groups.iter().map(|g| {
            let w = 1.0 / g.len() as f64;
            g.iter().map(|&i| (i, w)).collect()
        }))
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply(&self, input: &Mat) -> Mat {
        let cols = input.ncols();
        let mut out = Mat::zeros((self.rows(), cols));
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            for k in self.offsets[r]..self.offsets[r + 1] {
                row.scaled_add(self.weights[k], &input.row(self.indices[k]));
            }
        }
        out
    }
}

/// Precomputed rotation angles for rotary encodings: entry `(m, p)` rotates the
/// column pair `pairs[p]` of row `m`.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    pub cos: Mat,
    pub sin: Mat,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    L2NormalizeRows { x: Var, inv_norm: Vec<f64> },
    GatherRows(Var, Arc<Vec<usize>>),
    GatherCols(Var, Arc<Vec<usize>>),
    Mix(Var, Arc<RowMix>),
    SegmentMax { x: Var, argmax: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Rotary(Var, Arc<RotaryTable>),
    Sum(Var),
    PickMean(Var, Arc<Vec<(usize, usize)>>),
    BceWithLogits { z: Var, targets: Arc<Mat> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// One recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn scalar(v: f64) -> Mat {
    Mat::from_elem((1, 1), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient is tracked (used for testing and probing).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(params.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar_value(s);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::ScaleBy(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.outer_iter_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.outer_iter_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.outer_iter_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Divides each row by `sqrt(‖row‖² + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let mut inv_norm = Vec::with_capacity(out.nrows());
        for mut row in out.outer_iter_mut() {
            let inv = 1.0 / (row.dot(&row) + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_norm.push(inv);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows { x: a, inv_norm }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx), ng)
    }

    pub fn gather_cols(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(1), &idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherCols(a, idx), ng)
    }

    pub fn mix_rows(&mut self, a: Var, mix: Arc<RowMix>) -> Var {
        let v = mix.apply(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Mix(a, mix), ng)
    }

    /// Column-wise max over consecutive row segments `offsets[g]..offsets[g + 1]`.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Var {
        let x = self.value(a);
        let groups = offsets.len() - 1;
        let cols = x.ncols();
        let mut out = Mat::zeros((groups, cols));
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            let (lo, hi) = (offsets[g], offsets[g + 1]);
            assert!(hi > lo, "empty segment");
            for c in 0..cols {
                let mut best = lo;
                let mut bv = x[[lo, c]];
                for r in lo + 1..hi {
                    let v = x[[r, c]];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out[[g, c]] = bv;
                argmax[g * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMax { x: a, argmax }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn rotary(&mut self, a: Var, table: Arc<RotaryTable>) -> Var {
        let v = rotate(self.value(a), &table, false);
        let ng = self.ng(a);
        self.push(v, Op::Rotary(a, table), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean of the listed `(row, col)` entries.
    pub fn pick_mean(&mut self, a: Var, entries: Arc<Vec<(usize, usize)>>) -> Var {
        let x = self.value(a);
        let n = entries.len().max(1) as f64;
        let v = scalar(entries.iter().map(|&(r, c)| x[[r, c]]).sum::<f64>() / n);
        let ng = self.ng(a);
        self.push(v, Op::PickMean(a, entries), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `targets`, computed stably from logits.
    pub fn bce_with_logits(&mut self, z: Var, targets: Arc<Mat>) -> Var {
        let x = self.value(z);
        assert_eq!(x.dim(), targets.dim(), "bce target shape");
        let n = x.len().max(1) as f64;
        let total: f64 = x.iter().zip(targets.iter()).map(|(&z, &t)| softplus(z) - t * z).sum();
        let ng = self.ng(z);
        self.push(scalar(total / n), Op::BceWithLogits { z, targets }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Gradients {
        let grads = self.backward_all(loss);
        let mut out = Gradients::zeros_like(params);
        for (id, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                out.accumulate(*id, g);
            }
        }
        out
    }

    /// Gradient of `loss` with respect to an arbitrary node (zeros if unreachable).
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Mat {
        let grads = self.backward_all(loss);
        grads[wrt.0]
            .clone()
            .unwrap_or_else(|| Mat::zeros(self.nodes[wrt.0].value.dim()))
    }

    fn backward_all(&self, loss: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, dy.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(dy));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, dy.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, dy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, -dy);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, dy * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, dy * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, dy.clone());
                if self.ng(*r) {
                    self.acc(grads, *r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.ng(*a) {
                    self.acc(grads, *a, dy * self.value(*r));
                }
                if self.ng(*r) {
                    let g = (dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *r, g);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, dy * *s),
            Op::ScaleBy(a, s) => {
                let sv = self.scalar_value(*s);
                if self.ng(*a) {
                    self.acc(grads, *a, dy * sv);
                }
                if self.ng(*s) {
                    let g = (dy * self.value(*a)).sum();
                    self.acc(grads, *s, scalar(g));
                }
            }
            Op::Relu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(y).for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
                self.acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                self.acc(grads, *a, g);
            }
            Op::LayerNorm { x, inv_std } => {
                let mut g = dy.clone();
                for ((mut grow, yrow), is) in g.outer_iter_mut().zip(y.outer_iter()).zip(inv_std) {
                    let n = grow.len() as f64;
                    let mean_dy = grow.sum() / n;
                    let mean_dyy = grow.dot(&yrow) / n;
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|g, &yv| *g = is * (*g - mean_dy - yv * mean_dyy));
                }
                self.acc(grads, *x, g);
            }
            Op::Softmax(a) => {
                let mut g = dy.clone();
                for (mut grow, yrow) in g.outer_iter_mut().zip(y.outer_iter()) {
                    let d = grow.dot(&yrow);
                    Zip::from(&mut grow).and(&yrow).for_each(|g, &yv| *g = yv * (*g - d));
                }
                self.acc(grads, *a, g);
            }
            Op::LogSoftmax(a) => {
                let mut g = dy.clone();
                for (mut grow, yrow) in g.outer_iter_mut().zip(y.outer_iter()) {
                    let total = grow.sum();
                    Zip::from(&mut grow).and(&yrow).for_each(|g, &yv| *g -= yv.exp() * total);
                }
                self.acc(grads, *a, g);
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                let mut g = dy.clone();
                for ((mut grow, yrow), inv) in g.outer_iter_mut().zip(y.outer_iter()).zip(inv_norm) {
                    let d = grow.dot(&yrow);
                    Zip::from(&mut grow).and(&yrow).for_each(|g, &yv| *g = inv * (*g - yv * d));
                }
                self.acc(grads, *x, g);
            }
            Op::GatherRows(a, idx) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = g.row_mut(src);
                    row += &dy.row(r);
                }
                self.acc(grads, *a, g);
            }
            Op::GatherCols(a, idx) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                for (c, &src) in idx.iter().enumerate() {
                    let mut col = g.column_mut(src);
                    col += &dy.column(c);
                }
                self.acc(grads, *a, g);
            }
            Op::Mix(a, mix) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                for r in 0..mix.rows() {
                    for k in mix.offsets[r]..mix.offsets[r + 1] {
                        g.row_mut(mix.indices[k]).scaled_add(mix.weights[k], &dy.row(r));
                    }
                }
                self.acc(grads, *a, g);
            }
            Op::SegmentMax { x, argmax } => {
                let mut g = Mat::zeros(self.value(*x).dim());
                let cols = dy.ncols();
                for gi in 0..dy.nrows() {
                    for c in 0..cols {
                        g[[argmax[gi * cols + c], c]] += dy[[gi, c]];
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.ng(*p) {
                        self.acc(grads, *p, dy.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    if self.ng(*p) {
                        self.acc(grads, *p, dy.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                self.acc(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                self.acc(grads, *a, g);
            }
            Op::Rotary(a, table) => self.acc(grads, *a, rotate(dy, table, true)),
            Op::Sum(a) => {
                let d = dy[[0, 0]];
                self.acc(grads, *a, Mat::from_elem(self.value(*a).dim(), d));
            }
            Op::PickMean(a, entries) => {
                let d = dy[[0, 0]] / entries.len().max(1) as f64;
                let mut g = Mat::zeros(self.value(*a).dim());
                for &(r, c) in entries.iter() {
                    g[[r, c]] += d;
                }
                self.acc(grads, *a, g);
            }
            Op::BceWithLogits { z, targets } => {
                let x = self.value(*z);
                let d = dy[[0, 0]] / x.len().max(1) as f64;
                let mut g = Mat::zeros(x.dim());
                Zip::from(&mut g)
                    .and(x)
                    .and(targets.as_ref())
                    .for_each(|g, &z, &t| *g = d * (sigmoid(z) - t));
                self.acc(grads, *z, g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn rotate(x: &Mat, table: &RotaryTable, inverse: bool) -> Mat {
    let mut out = x.clone();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (m, mut row) in out.outer_iter_mut().enumerate() {
        let src = x.row(m);
        for (p, &(i, j)) in table.pairs.iter().enumerate() {
            let c = table.cos[[m, p]];
            let s = sign * table.sin[[m, p]];
            let (a, b) = (src[i], src[j]);
            row[i] = a * c - b * s;
            row[j] = a * s + b * c;
        }
    }
    out
}
