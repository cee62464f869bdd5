//! Eager reverse-mode tape over matrix-level primitives.
//!
//! Values are computed as nodes are pushed, so callers can inspect an
//! intermediate (for example router scores) before deciding how to continue
//! the graph. Nodes only reference earlier nodes; `backward` walks the list
//! once in reverse.

use std::collections::BTreeMap;

use super::{sigmoid, softplus, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `n x m` plus a `1 x m` row broadcast down the rows.
    AddRow(NodeId, NodeId),
    /// `n x m` times an `n x 1` column broadcast across the columns.
    MulCol(NodeId, NodeId),
    /// `n x m` divided by an `n x 1` column.
    DivCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    ColSum(NodeId),
    LogSumExpRows(NodeId),
    SoftmaxRows(NodeId),
    /// One-hot of the row argmax; backward uses the softmax Jacobian.
    ArgmaxRows(NodeId),
    Column(NodeId, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Matrix) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push((name.to_owned(), id));
        id
    }

    /// Leaf that receives no reported gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let v = va.matmul_unchecked(vb);
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_t", va, vb));
        }
        let v = va.matmul_t_unchecked(vb);
        Ok(self.push(Op::MatMulT(a, b), v))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let v = va.zip_map(vb, f);
        Ok(self.push(op, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va, vr));
        }
        let mut v = va.clone();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(shape_err("mul_col", va, vc));
        }
        let v = Matrix::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) * vc.get(i, 0));
        Ok(self.push(Op::MulCol(a, col), v))
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(shape_err("div_col", va, vc));
        }
        let v = Matrix::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) / vc.get(i, 0));
        Ok(self.push(Op::DivCol(a, col), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Mean of all entries as a `1 x 1` node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Matrix::from_fn(va.rows(), 1, |i, _| va.row(i).iter().sum());
        self.push(Op::RowSum(a), v)
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Matrix::zeros(1, va.cols());
        for i in 0..va.rows() {
            for (o, &x) in v.data_mut().iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        self.push(Op::ColSum(a), v)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Matrix::from_fn(va.rows(), 1, |i, _| super::logsumexp(va.row(i)));
        self.push(Op::LogSumExpRows(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Forward: one-hot of each row's argmax (lowest index wins ties).
    /// Backward: straight-through, using the softmax Jacobian of the row.
    pub fn argmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Matrix::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            v.set(i, argmax(va.row(i)), 1.0);
        }
        self.push(Op::ArgmaxRows(a), v)
    }

    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let va = self.value(a);
        if j >= va.cols() {
            return Err(Error::Shape {
                op: "column",
                lhs: va.shape(),
                rhs: (j, 1),
            });
        }
        let v = Matrix::col_vector(&va.col(j));
        Ok(self.push(Op::Column(a, j), v))
    }

    /// Reverse sweep from a `1 x 1` loss node. Parameters the loss does not
    /// reach receive exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(&node.op, &node.value, &g);
            for (target, contrib) in contributions {
                accumulate(&mut grads[target.0], contrib);
            }
            grads[idx] = Some(g);
        }

        let mut map = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.value(*id).shape();
            let g = grads
                .get(id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            match map.get_mut(name) {
                // Same parameter registered twice: gradients add.
                Some(existing) => Matrix::add_assign_unchecked(existing, &g),
                None => {
                    map.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { map })
    }

    fn local_grads(&self, op: &Op, out: &Matrix, g: &Matrix) -> Vec<(NodeId, Matrix)> {
        let val = |id: NodeId| self.value(id);
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![(a, g.matmul_t_unchecked(val(b))), (b, val(a).t_matmul_unchecked(g))],
            Op::MatMulT(a, b) => vec![(a, g.matmul_unchecked(val(b))), (b, g.t_matmul_unchecked(val(a)))],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (a, g.zip_map(val(b), |x, y| x * y)),
                (b, g.zip_map(val(a), |x, y| x * y)),
            ],
            Op::Div(a, b) => {
                let vb = val(b);
                let da = g.zip_map(vb, |x, y| x / y);
                let db = Matrix::from_fn(g.rows(), g.cols(), |i, j| -g.get(i, j) * out.get(i, j) / vb.get(i, j));
                vec![(a, da), (b, db)]
            }
            Op::AddRow(a, row) => vec![(a, g.clone()), (row, col_sums(g))],
            Op::MulCol(a, col) => {
                let (va, vc) = (val(a), val(col));
                let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vc.get(i, 0));
                let dc = Matrix::from_fn(g.rows(), 1, |i, _| {
                    g.row(i).iter().zip(va.row(i)).map(|(x, y)| x * y).sum()
                });
                vec![(a, da), (col, dc)]
            }
            Op::DivCol(a, col) => {
                let vc = val(col);
                let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) / vc.get(i, 0));
                let dc = Matrix::from_fn(g.rows(), 1, |i, _| {
                    -g.row(i).iter().zip(out.row(i)).map(|(x, y)| x * y).sum::<f64>() / vc.get(i, 0)
                });
                vec![(a, da), (col, dc)]
            }
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::Relu(a) => vec![(a, g.zip_map(val(a), |x, y| if y > 0.0 { x } else { 0.0 }))],
            Op::Softplus(a) => vec![(a, g.zip_map(val(a), |x, y| x * sigmoid(y)))],
            Op::Square(a) => vec![(a, g.zip_map(val(a), |x, y| 2.0 * x * y))],
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                vec![(a, Matrix::filled(r, c, g.get(0, 0)))]
            }
            Op::RowSum(a) => {
                let (r, c) = val(a).shape();
                vec![(a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)))]
            }
            Op::ColSum(a) => {
                let (r, c) = val(a).shape();
                vec![(a, Matrix::from_fn(r, c, |_, j| g.get(0, j)))]
            }
            Op::LogSumExpRows(a) => {
                let p = softmax_rows(val(a));
                vec![(a, Matrix::from_fn(p.rows(), p.cols(), |i, j| g.get(i, 0) * p.get(i, j)))]
            }
            Op::SoftmaxRows(a) => vec![(a, softmax_vjp(out, g))],
            Op::ArgmaxRows(a) => vec![(a, softmax_vjp(&softmax_rows(val(a)), g))],
            Op::Column(a, j) => {
                let (r, c) = val(a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.set(i, j, g.get(i, 0));
                }
                vec![(a, d)]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, contrib: Matrix) {
    match slot {
        Some(existing) => existing.add_assign_unchecked(&contrib),
        None => *slot = Some(contrib),
    }
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut v = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &x) in v.data_mut().iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    v
}

pub(crate) fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

fn softmax_vjp(p: &Matrix, g: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let inner: f64 = g.row(i).iter().zip(p.row(i)).map(|(x, y)| x * y).sum();
        for j in 0..p.cols() {
            d.set(i, j, p.get(i, j) * (g.get(i, j) - inner));
        }
    }
    d
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
