//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op evaluates eagerly and appends a node. Nodes whose inputs do not
//! require gradients are stored as constants, so a tape built only from
//! constants is a plain forward evaluator. `backward` walks the nodes in
//! reverse insertion order, which is a topological order by construction.

use nalgebra::Matrix3;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied op: `(upstream, inputs, output) -> input grads`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    NeighborMean(Var, Vec<usize>, usize),
    NeighborMax(Var, Vec<usize>),
    ContextNorm(Var, Vec<Option<f64>>),
    Clamp(Var, f64, f64),
    PolarRotation(Var, Box<PolarSaved>),
    Custom(Vec<Var>, CustomBackward),
}

struct PolarSaved {
    v: Matrix3<f64>,
    lambda: [f64; 3],
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Threshold under which a context-normalization channel is left unscaled.
pub const CONTEXT_NORM_MIN_STD: f64 = 1e-8;
/// Added to the squared norm in `l2_normalize_rows`; guards zero rows.
pub const L2_NORM_EPS: f64 = 1e-24;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sr != (1, sa.1) {
            return Err(shape_err(op, format!("{sa:?} with row {sr:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, r) = (self.value(a), self.value(row));
        let mut out = x.clone();
        let cols = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, r.data()[i % cols]);
        }
        out
    }

    /// `a + row`, the row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let value = self.broadcast_row(a, row, |x, y| x + y);
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("sub_row", a, row)?;
        let value = self.broadcast_row(a, row, |x, y| x - y);
        self.push("sub_row", value, Op::SubRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let value = self.broadcast_row(a, row, |x, y| x * y);
        self.push("mul_row", value, Op::MulRow(a, row), &[a, row])
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.value(a).shape(), self.value(col).shape());
        if sc != (sa.0, 1) {
            return Err(shape_err("mul_col", format!("{sa:?} with column {sc:?}")));
        }
        let (x, w) = (self.value(a), self.value(col));
        let mut value = x.clone();
        let cols = sa.1;
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= w.data()[i / cols];
        }
        self.push("mul_col", value, Op::MulCol(a, col), &[a, col])
    }

    /// Divides every entry of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(shape_err("div_scalar", format!("divisor {:?}", self.value(s).shape())));
        }
        let d = self.value(s).item();
        if d == 0.0 {
            return Err(Error::Domain { op: "div_scalar", value: d });
        }
        let value = self.value(a).map(|x| x / d);
        self.push("div_scalar", value, Op::DivScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scaled(s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain { op: "log", value: bad });
        }
        let value = self.value(a).map(f64::ln);
        self.push("log", value, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain { op: "sqrt", value: bad });
        }
        let value = self.value(a).map(f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::abs);
        self.push("abs", value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Column means, `N x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let value = x.col_sums().scaled(1.0 / x.rows() as f64);
        self.push("mean_rows", value, Op::MeanRows(a), &[a])
    }

    /// Row sums, `N x c -> N x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_sums();
        self.push("sum_cols", value, Op::SumCols(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        let cols = x.cols();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let norms: Vec<f64> = (0..x.rows())
            .map(|r| (x.row_slice(r).iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS).sqrt())
            .collect();
        let mut value = x.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v /= norms[i / cols];
        }
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows(a, norms), &[a])
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(Error::Empty("concat")),
        };
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(shape_err("concat", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", x.rows())));
        }
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(x.row_slice(i));
        }
        let value = Tensor::new(idx.len(), cols, data)?;
        self.push("gather_rows", value, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn check_neighbors(&self, op: &'static str, a: Var, idx: &[usize], k: usize) -> Result<()> {
        let n = self.value(a).rows();
        if k == 0 || idx.len() % k != 0 || idx.iter().any(|&i| i >= n) {
            return Err(shape_err(op, format!("{} indices, k = {k}, {n} rows", idx.len())));
        }
        Ok(())
    }

    /// Row `i` of the output is the mean of rows `idx[i*k..(i+1)*k]` of `a`.
    pub fn neighbor_mean(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        self.check_neighbors("neighbor_mean", a, idx, k)?;
        let x = self.value(a);
        let cols = x.cols();
        let m = idx.len() / k;
        let mut value = Tensor::zeros(m, cols);
        for i in 0..m {
            let out = &mut value.data_mut()[i * cols..(i + 1) * cols];
            for &j in &idx[i * k..(i + 1) * k] {
                for (o, v) in out.iter_mut().zip(x.row_slice(j)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= k as f64;
            }
        }
        self.push("neighbor_mean", value, Op::NeighborMean(a, idx.to_vec(), k), &[a])
    }

    /// Channel-wise max over each neighborhood; ties resolve to the first listed neighbor.
    pub fn neighbor_max(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        self.check_neighbors("neighbor_max", a, idx, k)?;
        let x = self.value(a);
        let cols = x.cols();
        let m = idx.len() / k;
        let mut value = Tensor::zeros(m, cols);
        let mut argmax = vec![0usize; m * cols];
        for i in 0..m {
            for c in 0..cols {
                let mut best = idx[i * k];
                for &j in &idx[i * k + 1..(i + 1) * k] {
                    if x.get(j, c) > x.get(best, c) {
                        best = j;
                    }
                }
                argmax[i * cols + c] = best;
                value.set(i, c, x.get(best, c));
            }
        }
        self.push("neighbor_max", value, Op::NeighborMax(a, argmax), &[a])
    }

    /// Per-channel standardization across rows. Channels with standard deviation
    /// below [`CONTEXT_NORM_MIN_STD`] are only centered.
    pub fn context_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, cols) = x.shape();
        if n == 0 {
            return Err(Error::Empty("context_norm"));
        }
        let mean = x.col_sums().scaled(1.0 / n as f64);
        let mut var = vec![0.0; cols];
        for r in 0..n {
            for c in 0..cols {
                var[c] += (x.get(r, c) - mean.data()[c]).powi(2);
            }
        }
        // None marks a channel that is only centered
        let std: Vec<Option<f64>> = var
            .iter()
            .map(|v| Some((v / n as f64).sqrt()).filter(|s| *s >= CONTEXT_NORM_MIN_STD))
            .collect();
        let mut value = x.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = (*v - mean.data()[c]) / std[c].unwrap_or(1.0);
        }
        self.push("context_norm", value, Op::ContextNorm(a, std), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(a, lo, hi), &[a])
    }

    /// Nearest proper rotation to a 3x3 matrix `M`, i.e. the maximizer of
    /// `tr(R^T M)` over SO(3). With `M = U S V^T`, `R = U diag(1, 1, d) V^T`
    /// where `d` fixes the determinant. The backward pass differentiates the
    /// polar factor exactly; it is singular only when two signed singular
    /// values cancel.
    pub fn polar_rotation(&mut self, m: Var) -> Result<Var> {
        if self.value(m).shape() != (3, 3) {
            return Err(shape_err("polar_rotation", format!("{:?}", self.value(m).shape())));
        }
        let mat = Matrix3::from_row_slice(self.value(m).data());
        let (r, v, lambda) = polar_factor(&mat);
        let value = Tensor::new(3, 3, matrix_to_row_major(&r))?;
        self.push(
            "polar_rotation",
            value,
            Op::PolarRotation(m, Box::new(PolarSaved { v, lambda })),
            &[m],
        )
    }

    /// Appends an op with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        self.push("custom", value, Op::Custom(inputs.to_vec(), Box::new(backward)), inputs)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.matmul(&val(*b).transpose()).expect("matmul grad")));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, val(*a).transpose().matmul(g).expect("matmul grad")));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scaled(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |u, x| u * x)),
                (*b, g.zip_map(val(*a), |u, x| u * x)),
            ],
            Op::AddRow(a, r) => vec![(*a, g.clone()), (*r, g.col_sums())],
            Op::SubRow(a, r) => vec![(*a, g.clone()), (*r, g.col_sums().scaled(-1.0))],
            Op::MulRow(a, r) => {
                let (x, row) = (val(*a), val(*r));
                let cols = x.cols();
                let mut ga = g.clone();
                for (i, v) in ga.data_mut().iter_mut().enumerate() {
                    *v *= row.data()[i % cols];
                }
                vec![(*a, ga), (*r, g.zip_map(x, |u, v| u * v).col_sums())]
            }
            Op::MulCol(a, w) => {
                let (x, col) = (val(*a), val(*w));
                let cols = x.cols();
                let mut ga = g.clone();
                for (i, v) in ga.data_mut().iter_mut().enumerate() {
                    *v *= col.data()[i / cols];
                }
                vec![(*a, ga), (*w, g.zip_map(x, |u, v| u * v).row_sums())]
            }
            Op::DivScalar(a, s) => {
                let d = val(*s).item();
                vec![
                    (*a, g.scaled(1.0 / d)),
                    (*s, Tensor::scalar(-g.dot(y) / d)),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.scaled(*s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |u, x| if x > 0.0 { u } else { 0.0 }))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |u, s| u * s * (1.0 - s)))],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |u, e| u * e))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |u, x| u / x))],
            Op::Sqrt(a) => vec![(*a, g.zip_map(y, |u, s| u / (2.0 * s)))],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |u, x| if x > 0.0 { u } else if x < 0.0 { -u } else { 0.0 }))],
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |u, x| 2.0 * u * x))],
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::filled(r, c, g.item()))]
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::filled(r, c, g.item() / (r * c) as f64))]
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i % c] / r as f64;
                }
                vec![(*a, out)]
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i / c];
                }
                vec![(*a, out)]
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let mut out = Tensor::zeros(y.rows(), c);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        out.set(r, k, yr[k] * (gr[k] - s));
                    }
                }
                vec![(*a, out)]
            }
            Op::L2NormalizeRows(a, norms) => {
                let c = y.cols();
                let mut out = Tensor::zeros(y.rows(), c);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        out.set(r, k, (gr[k] - yr[k] * s) / norms[r]);
                    }
                }
                vec![(*a, out)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = val(*p).shape();
                    let mut gp = Tensor::zeros(r, c);
                    for i in 0..r {
                        for k in 0..c {
                            gp.set(i, k, g.get(i, offset + k));
                        }
                    }
                    offset += c;
                    out.push((*p, gp));
                }
                out
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for (row, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        out.data_mut()[i * c + k] += g.get(row, k);
                    }
                }
                vec![(*a, out)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::NeighborMean(a, idx, k) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                let inv = 1.0 / *k as f64;
                for i in 0..idx.len() / k {
                    for &j in &idx[i * k..(i + 1) * k] {
                        for ch in 0..c {
                            out.data_mut()[j * c + ch] += g.get(i, ch) * inv;
                        }
                    }
                }
                vec![(*a, out)]
            }
            Op::NeighborMax(a, argmax) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for (slot, &j) in argmax.iter().enumerate() {
                    out.data_mut()[j * c + slot % c] += g.data()[slot];
                }
                vec![(*a, out)]
            }
            Op::ContextNorm(a, std) => {
                let (n, c) = y.shape();
                let mut out = Tensor::zeros(n, c);
                for ch in 0..c {
                    let gm: f64 = (0..n).map(|r| g.get(r, ch)).sum::<f64>() / n as f64;
                    match std[ch] {
                        Some(s) => {
                            let gy: f64 = (0..n).map(|r| g.get(r, ch) * y.get(r, ch)).sum::<f64>() / n as f64;
                            for r in 0..n {
                                out.set(r, ch, (g.get(r, ch) - gm - y.get(r, ch) * gy) / s);
                            }
                        }
                        None => {
                            for r in 0..n {
                                out.set(r, ch, g.get(r, ch) - gm);
                            }
                        }
                    }
                }
                vec![(*a, out)]
            }
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.zip_map(val(*a), |u, x| if x > *lo && x < *hi { u } else { 0.0 }),
            )],
            Op::PolarRotation(m, saved) => {
                let gm = Matrix3::from_row_slice(g.data());
                let r = Matrix3::from_row_slice(y.data());
                let dm = polar_backward(&r, &saved.v, &saved.lambda, &gm);
                vec![(*m, Tensor::new(3, 3, matrix_to_row_major(&dm)).expect("3x3"))]
            }
            Op::Custom(inputs, back) => {
                let xs: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs.iter().copied().zip(back(g, &xs, y)).collect()
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v` with zeros for unreached nodes.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

pub(crate) fn matrix_to_row_major(m: &Matrix3<f64>) -> Vec<f64> {
    (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect()
}

/// Returns `(R, V, lambda)` where `R^T M = V diag(lambda) V^T`.
pub(crate) fn polar_factor(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>, [f64; 3]) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = Matrix3::from_columns(&order.map(|i| u.column(i).into_owned()));
    let v = Matrix3::from_columns(&order.map(|i| vt.row(i).transpose()));
    let sigma = order.map(|i| svd.singular_values[i]);
    let d = if (u * v.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
    let dm = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let r = u * dm * v.transpose();
    (r, v, [sigma[0], sigma[1], d * sigma[2]])
}

/// Pulls `dL/dR` back to `dL/dM` for `R = polar_factor(M)`.
///
/// Perturbing `M` moves `R` along `R * Omega` with `Omega` skew, where
/// `Omega S + S Omega = R^T dM - dM^T R` and `S = R^T M`.
pub(crate) fn polar_backward(
    r: &Matrix3<f64>,
    v: &Matrix3<f64>,
    lambda: &[f64; 3],
    g: &Matrix3<f64>,
) -> Matrix3<f64> {
    let b = v.transpose() * (r.transpose() * g) * v;
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let den = lambda[i] + lambda[j];
            if i != j && den.abs() > 1e-12 {
                c[(i, j)] = b[(i, j)] / den;
            }
        }
    }
    let e = v * c * v.transpose();
    r * (e - e.transpose())
}
