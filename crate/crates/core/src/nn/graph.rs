//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar (1×1) node walks the tape in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.

use std::collections::BTreeMap;
use std::ops::Index;

use super::matrix::{dot, Matrix};
use super::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    BagMean(Var, Vec<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    NormalizeRows(Var),
    RmsNormRows(Var),
    CrossEntropy(Var, Vec<Option<usize>>, usize),
    WeightedSum(Var, Matrix),
    SumAll(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

const NORM_EPS: f64 = 1e-12;
const RMS_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Parameters of a [`ParamSet`] bound into a graph as trainable leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient for every bound parameter; zero where the loss does not depend on it.
    pub fn grads(&self, graph: &Graph, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.vars
            .iter()
            .map(|(name, &var)| {
                let g = grads.get(var).cloned().unwrap_or_else(|| {
                    let (r, c) = graph.value(var).shape();
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, m)| (name.clone(), self.param(m.clone())))
            .collect();
        Bound { vars }
    }

    /// Like [`Graph::bind`] but without gradient tracking (inference).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, m)| (name.clone(), self.constant(m.clone())))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds the 1×c row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds a constant matrix (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(c);
        let ng = self.needs(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&super::matrix::softmax(x.row(r)));
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&super::matrix::log_softmax(x.row(r)));
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        self.push(value, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// Row `i` of the output is the mean of `table` rows listed in `bags[i]`
    /// (zero for an empty bag).
    pub fn bag_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(bags.len(), t.cols());
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let w = 1.0 / bag.len() as f64;
            let out = value.row_mut(i);
            for &id in bag {
                for (o, x) in out.iter_mut().zip(t.row(id)) {
                    *o += w * x;
                }
            }
        }
        let ng = self.needs(table);
        self.push(value, Op::BagMean(table, bags), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let n = (dot(x.row(r), x.row(r)) + NORM_EPS).sqrt();
            for v in value.row_mut(r) {
                *v /= n;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    /// Divides every row by its root-mean-square.
    pub fn rms_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols() as f64;
        let mut value = x.clone();
        for r in 0..x.rows() {
            let rms = (dot(x.row(r), x.row(r)) / c + RMS_EPS).sqrt();
            for v in value.row_mut(r) {
                *v /= rms;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::RmsNormRows(a), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with a `None` target are ignored; the result is 0 when
    /// every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "cross_entropy target count");
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= super::matrix::log_softmax(x.row(r))[t];
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits);
        self.push(
            Matrix::scalar(value),
            Op::CrossEntropy(logits, targets.to_vec(), count),
            ng,
        )
    }

    /// `Σ a ⊙ weights` for a constant weight matrix.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), weights.shape(), "weighted_sum shape mismatch");
        let value = dot(x.data(), weights.data());
        let ng = self.needs(a);
        self.push(Matrix::scalar(value), Op::WeightedSum(a, weights), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Matrix::scalar(value), Op::SumAll(a), ng)
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, dy.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t_matmul(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    acc(*a, dy.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, dy.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, dy.clone());
                if self.needs(*row) {
                    let mut g = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, d) in g.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                    acc(*row, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = dy.data().iter().zip(bv.data()).map(|(g, x)| g * x).collect();
                    acc(*a, Matrix::from_vec(dy.rows(), dy.cols(), d));
                }
                if self.needs(*b) {
                    let d = dy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(*b, Matrix::from_vec(dy.rows(), dy.cols(), d));
                }
            }
            Op::Scale(a, s) => acc(*a, dy.map(|g| g * s)),
            Op::AddConst(a) => acc(*a, dy.clone()),
            Op::Tanh(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                acc(*a, Matrix::from_vec(dy.rows(), dy.cols(), d));
            }
            Op::SoftmaxRows(a) => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(dy.row(r), y.row(r));
                    for ((o, d), p) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *o = p * (d - s);
                    }
                }
                acc(*a, g);
            }
            Op::LogSoftmaxRows(a) => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f64 = dy.row(r).iter().sum();
                    for ((o, d), ly) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *o = d - ly.exp() * s;
                    }
                }
                acc(*a, g);
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let mut g = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, d) in g.row_mut(id).iter_mut().zip(dy.row(i)) {
                        *o += d;
                    }
                }
                acc(*table, g);
            }
            Op::BagMean(table, bags) => {
                let t = self.value(*table);
                let mut g = Matrix::zeros(t.rows(), t.cols());
                for (i, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        continue;
                    }
                    let w = 1.0 / bag.len() as f64;
                    for &id in bag {
                        for (o, d) in g.row_mut(id).iter_mut().zip(dy.row(i)) {
                            *o += w * d;
                        }
                    }
                }
                acc(*table, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let slice = dy.data()[offset * cols..(offset + rows) * cols].to_vec();
                    acc(p, Matrix::from_vec(rows, cols, slice));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        g.row_mut(r)
                            .copy_from_slice(&dy.row(r)[offset..offset + cols]);
                    }
                    acc(p, g);
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut g = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                acc(*a, g);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = (dot(x.row(r), x.row(r)) + NORM_EPS).sqrt();
                    let s = dot(y.row(r), dy.row(r));
                    for ((o, d), yv) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *o = (d - yv * s) / n;
                    }
                }
                acc(*a, g);
            }
            Op::RmsNormRows(a) => {
                let x = self.value(*a);
                let c = x.cols() as f64;
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let rms = (dot(x.row(r), x.row(r)) / c + RMS_EPS).sqrt();
                    let s = dot(y.row(r), dy.row(r)) / c;
                    for ((o, d), yv) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *o = (d - yv * s) / rms;
                    }
                }
                acc(*a, g);
            }
            Op::CrossEntropy(logits, targets, count) => {
                let x = self.value(*logits);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                if *count > 0 {
                    let w = dy.item() / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let p = super::matrix::softmax(x.row(r));
                            for (o, pv) in g.row_mut(r).iter_mut().zip(p) {
                                *o = w * pv;
                            }
                            g.row_mut(r)[t] -= w;
                        }
                    }
                }
                acc(*logits, g);
            }
            Op::WeightedSum(a, weights) => {
                let d = dy.item();
                acc(*a, weights.map(|w| w * d));
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, dy.item()));
            }
        }
    }
}
