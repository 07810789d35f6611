//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a Wengert list: every primitive appends one node holding
//! its forward value and the ids of its parents. Nodes can only refer to
//! earlier nodes, so walking the list backwards is a valid reverse
//! topological order and [`Graph::backward`] is a single pass.
//!
//! Gradients are accumulated: calling `backward` twice without
//! [`Graph::zero_grad`] adds the second pass on top of the first.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Error)]
#[error("{op}: incompatible shapes {shapes:?}: {detail}")]
pub struct ShapeError {
    pub op: &'static str,
    pub shapes: Vec<[usize; 2]>,
    pub detail: String,
}

#[derive(Debug, Clone, Error)]
pub enum GraphError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward needs a scalar loss, got a {0}x{1} node")]
    NonScalarLoss(usize, usize),
}

/// The primitive set, addressable by kind for generic drivers such as the
/// finite-difference suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulBT,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulRow,
    ConcatCols,
    ConcatRows,
    ConcatOne,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Softplus,
    Exp,
    Ln,
    Square,
    Abs,
    Softmax,
    LogSoftmax,
    CausalSoftmax,
    LayerNorm,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::MatMul,
        OpKind::MatMulBT,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::ConcatOne,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softplus,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Square,
        OpKind::Abs,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::CausalSoftmax,
        OpKind::LayerNorm,
        OpKind::Sum,
    ];

    pub fn arity(self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::MatMulBT
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::AddRow
            | OpKind::MulRow
            | OpKind::ConcatCols
            | OpKind::ConcatRows => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulScalarAt { x: NodeId, s: NodeId, index: usize },
    Scale(NodeId, f64),
    AddConst(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatOne(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    CausalSoftmax(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Dropout { x: NodeId, mask: Tensor },
    MaskRows { x: NodeId, mask: Vec<f64> },
    Embedding { table: NodeId, ids: Vec<usize> },
    Nll { logp: NodeId, targets: Vec<Option<usize>> },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, shapes: &[[usize; 2]], detail: impl Into<String>) -> ShapeError {
    ShapeError {
        op,
        shapes: shapes.to_vec(),
        detail: detail.into(),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds an input node (trainable parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of the last loss(es) with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Generic entry point over the primitive set.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, ShapeError> {
        if inputs.len() != kind.arity() {
            return Err(shape_err(
                "apply",
                &inputs.iter().map(|&i| self.shape(i)).collect::<Vec<_>>(),
                format!("{kind:?} takes {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        let a = inputs[0];
        Ok(match kind {
            OpKind::MatMul => self.matmul(a, inputs[1])?,
            OpKind::MatMulBT => self.matmul_bt(a, inputs[1])?,
            OpKind::Add => self.add(a, inputs[1])?,
            OpKind::Sub => self.sub(a, inputs[1])?,
            OpKind::Mul => self.mul(a, inputs[1])?,
            OpKind::Div => self.div(a, inputs[1])?,
            OpKind::AddRow => self.add_row(a, inputs[1])?,
            OpKind::MulRow => self.mul_row(a, inputs[1])?,
            OpKind::ConcatCols => self.concat_cols(inputs)?,
            OpKind::ConcatRows => self.concat_rows(inputs)?,
            OpKind::ConcatOne => self.concat_one(a),
            OpKind::Sigmoid => self.sigmoid(a),
            OpKind::Tanh => self.tanh(a),
            OpKind::Relu => self.relu(a),
            OpKind::Gelu => self.gelu(a),
            OpKind::Softplus => self.softplus(a),
            OpKind::Exp => self.exp(a),
            OpKind::Ln => self.ln(a),
            OpKind::Square => self.square(a),
            OpKind::Abs => self.abs(a),
            OpKind::Softmax => self.softmax(a),
            OpKind::LogSoftmax => self.log_softmax(a),
            OpKind::CausalSoftmax => self.causal_softmax(a)?,
            OpKind::LayerNorm => self.layer_norm(a),
            OpKind::Sum => self.sum(a),
        })
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb], "inner dimensions differ"));
        }
        let v = matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(shape_err("matmul_bt", &[sa, sb], "column counts differ"));
        }
        let v = matmul_bt(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMulBT(a, b)))
    }

    /// `[x, 1] * w^T` for `w` of shape `out x (in + 1)`: the bias is folded
    /// into the last weight column.
    pub fn affine(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, ShapeError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx[1] + 1 != sw[1] {
            return Err(shape_err(
                "affine",
                &[sx, sw],
                "weight must have one column per input plus a bias column",
            ));
        }
        let xb = self.concat_one(x);
        self.matmul_bt(xb, w)
    }

    // ---- elementwise binary ------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, &[sa, sb], "elementwise operands must match"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    fn row_operand(&self, op: &'static str, x: NodeId, r: NodeId) -> Result<(), ShapeError> {
        let (sx, sr) = (self.shape(x), self.shape(r));
        if sr[0] != 1 || sr[1] != sx[1] {
            return Err(shape_err(op, &[sx, sr], "row operand must be 1 x cols"));
        }
        Ok(())
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId, ShapeError> {
        self.row_operand("add_row", x, r)?;
        let mut v = self.value(x).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..v.rows() {
            for (a, b) in v.row_slice_mut(i).iter_mut().zip(&row) {
                *a += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, r)))
    }

    /// Multiplies every row of `x` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId, ShapeError> {
        self.row_operand("mul_row", x, r)?;
        let mut v = self.value(x).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..v.rows() {
            for (a, b) in v.row_slice_mut(i).iter_mut().zip(&row) {
                *a *= b;
            }
        }
        Ok(self.push(v, Op::MulRow(x, r)))
    }

    /// `x * s[index]` where `s` is a node and `index` a flat position in it.
    pub fn mul_scalar_at(&mut self, x: NodeId, s: NodeId, index: usize) -> Result<NodeId, ShapeError> {
        if index >= self.value(s).len() {
            return Err(shape_err(
                "mul_scalar_at",
                &[self.shape(x), self.shape(s)],
                format!("index {index} out of range"),
            ));
        }
        let c = self.value(s).data()[index];
        let v = self.value(x).map(|a| a * c);
        Ok(self.push(v, Op::MulScalarAt { x, s, index }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddConst(x))
    }

    // ---- structural ----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, ShapeError> {
        let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
        let rows = shapes.first().map_or(0, |s| s[0]);
        if parts.is_empty() || shapes.iter().any(|s| s[0] != rows) {
            return Err(shape_err("concat_cols", &shapes, "row counts differ"));
        }
        let cols: usize = shapes.iter().map(|s| s[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, ShapeError> {
        let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
        let cols = shapes.first().map_or(0, |s| s[1]);
        if parts.is_empty() || shapes.iter().any(|s| s[1] != cols) {
            return Err(shape_err("concat_rows", &shapes, "column counts differ"));
        }
        let rows: usize = shapes.iter().map(|s| s[0]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, ShapeError> {
        let s = self.shape(x);
        if start >= end || end > s[1] {
            return Err(shape_err("slice_cols", &[s], format!("bad range {start}..{end}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(s[0] * (end - start));
        for r in 0..s[0] {
            data.extend_from_slice(&src.row_slice(r)[start..end]);
        }
        let v = Tensor::from_vec(s[0], end - start, data);
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, ShapeError> {
        let s = self.shape(x);
        if start >= end || end > s[0] {
            return Err(shape_err("slice_rows", &[s], format!("bad range {start}..{end}")));
        }
        let v = Tensor::from_vec(
            end - start,
            s[1],
            self.value(x).data()[start * s[1]..end * s[1]].to_vec(),
        );
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    /// Appends a constant column of ones.
    pub fn concat_one(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (rows, cols) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(rows * (cols + 1));
        for r in 0..rows {
            data.extend_from_slice(src.row_slice(r));
            data.push(1.0);
        }
        self.push(Tensor::from_vec(rows, cols + 1, data), Op::ConcatOne(x))
    }

    // ---- elementwise unary --------------------------------------------

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Ln(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x))
    }

    // ---- row-wise normalisers -----------------------------------------

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let mut v = src.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_slice_mut(r));
        }
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_slice_mut(r);
            let lse = log_sum_exp(row);
            for a in row.iter_mut() {
                *a -= lse;
            }
        }
        self.push(v, Op::LogSoftmax(x))
    }

    /// Softmax over a square score matrix where row `i` may only see
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId, ShapeError> {
        let s = self.shape(x);
        if s[0] != s[1] {
            return Err(shape_err("causal_softmax", &[s], "scores must be square"));
        }
        let mut v = self.value(x).clone();
        for r in 0..s[0] {
            let row = v.row_slice_mut(r);
            softmax_in_place(&mut row[..=r]);
            row[r + 1..].fill(0.0);
        }
        Ok(self.push(v, Op::CausalSoftmax(x)))
    }

    /// Row-wise normalisation to zero mean and unit variance (no gain/bias).
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let cols = v.cols() as f64;
        let mut inv_std = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_slice_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm { x, inv_std })
    }

    // ---- masking, lookup, losses --------------------------------------

    /// Inverted dropout: keeps each entry with probability `1 - rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut RngStream) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        let s = self.shape(x);
        let keep = 1.0 - rate;
        let mask = Tensor::from_vec(
            s[0],
            s[1],
            (0..s[0] * s[1])
                .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let v = self.value(x).zip_map(&mask, |a, m| a * m);
        self.push(v, Op::Dropout { x, mask })
    }

    /// Multiplies row `r` by the constant `mask[r]`.
    pub fn mask_rows(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId, ShapeError> {
        let s = self.shape(x);
        if mask.len() != s[0] {
            return Err(shape_err("mask_rows", &[s], format!("mask has {} entries", mask.len())));
        }
        let mut v = self.value(x).clone();
        for (r, &m) in mask.iter().enumerate() {
            for a in v.row_slice_mut(r) {
                *a *= m;
            }
        }
        Ok(self.push(v, Op::MaskRows { x, mask }))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, ShapeError> {
        let s = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(shape_err("embedding", &[s], format!("id {bad} out of range")));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * s[1]);
        for &i in ids {
            data.extend_from_slice(src.row_slice(i));
        }
        let v = Tensor::from_vec(ids.len(), s[1], data);
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Cross-entropy: `-sum_r logp[r, targets[r]]` over rows with a target.
    pub fn nll(&mut self, logp: NodeId, targets: &[Option<usize>]) -> Result<NodeId, ShapeError> {
        let s = self.shape(logp);
        if targets.len() != s[0] || targets.iter().flatten().any(|&t| t >= s[1]) {
            return Err(shape_err("nll", &[s], format!("{} targets", targets.len())));
        }
        let src = self.value(logp);
        let total: f64 = targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| src.get(r, t)))
            .sum();
        Ok(self.push(
            Tensor::scalar(-total),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates d(loss)/d(node) to every node recorded before `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(GraphError::NonScalarLoss(s[0], s[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, matmul_bt(g, val(*b)));
                accumulate(grads, *b, matmul_at(val(*a), g));
            }
            Op::MatMulBT(a, b) => {
                accumulate(grads, *a, matmul(g, val(*b)));
                accumulate(grads, *b, matmul_at(g, val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                    .collect();
                accumulate(grads, *b, Tensor::from_vec(g.rows(), g.cols(), gb));
            }
            Op::AddRow(x, r) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *r, column_sums(g));
            }
            Op::MulRow(x, r) => {
                let rv = val(*r);
                let mut gx = g.clone();
                for i in 0..gx.rows() {
                    for (a, b) in gx.row_slice_mut(i).iter_mut().zip(rv.data()) {
                        *a *= b;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *r, column_sums(&g.zip_map(val(*x), |a, b| a * b)));
            }
            Op::MulScalarAt { x, s, index } => {
                let sv = val(*s);
                let c = sv.data()[*index];
                accumulate(grads, *x, g.map(|a| a * c));
                let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                gs.data_mut()[*index] = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                accumulate(grads, *s, gs);
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|a| a * c)),
            Op::AddConst(x) => accumulate(grads, *x, g.clone()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    accumulate(grads, p, gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let h = val(p).rows();
                    let gp = Tensor::from_vec(h, cols, g.data()[offset * cols..(offset + h) * cols].to_vec());
                    accumulate(grads, p, gp);
                    offset += h;
                }
            }
            Op::SliceCols { x, start } => {
                let xs = val(*x).shape();
                let mut gx = Tensor::zeros(xs[0], xs[1]);
                for r in 0..g.rows() {
                    gx.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let xs = val(*x).shape();
                let mut gx = Tensor::zeros(xs[0], xs[1]);
                gx.data_mut()[start * xs[1]..(start + g.rows()) * xs[1]].copy_from_slice(g.data());
                accumulate(grads, *x, gx);
            }
            Op::ConcatOne(x) => {
                let cols = g.cols() - 1;
                let mut gx = Tensor::zeros(g.rows(), cols);
                for r in 0..g.rows() {
                    gx.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[..cols]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => accumulate(grads, *x, g.zip_map(y, |a, s| a * s * (1.0 - s))),
            Op::Tanh(x) => accumulate(grads, *x, g.zip_map(y, |a, t| a * (1.0 - t * t))),
            Op::Relu(x) => accumulate(grads, *x, g.zip_map(val(*x), |a, v| if v > 0.0 { a } else { 0.0 })),
            Op::Gelu(x) => accumulate(grads, *x, g.zip_map(val(*x), |a, v| a * gelu_grad(v))),
            Op::Softplus(x) => accumulate(grads, *x, g.zip_map(val(*x), |a, v| a * sigmoid(v))),
            Op::Exp(x) => accumulate(grads, *x, g.zip_map(y, |a, e| a * e)),
            Op::Ln(x) => accumulate(grads, *x, g.zip_map(val(*x), |a, v| a / v)),
            Op::Square(x) => accumulate(grads, *x, g.zip_map(val(*x), |a, v| 2.0 * a * v)),
            Op::Abs(x) => accumulate(grads, *x, g.zip_map(val(*x), |a, v| a * sign(v))),
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let yr = y.row_slice(r);
                    let dotp: f64 = g.row_slice(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gi, &yi) in gx.row_slice_mut(r).iter_mut().zip(yr) {
                        *gi = yi * (*gi - dotp);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let total: f64 = g.row_slice(r).iter().sum();
                    for (gi, &yi) in gx.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                        *gi -= yi.exp() * total;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let mut gx = g.clone();
                let n = g.cols() as f64;
                for r in 0..gx.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gi), &yi) in gx.row_slice_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => accumulate(grads, *x, g.zip_map(mask, |a, m| a * m)),
            Op::MaskRows { x, mask } => {
                let mut gx = g.clone();
                for (r, &m) in mask.iter().enumerate() {
                    for a in gx.row_slice_mut(r) {
                        *a *= m;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Embedding { table, ids } => {
                let ts = val(*table).shape();
                let mut gt = Tensor::zeros(ts[0], ts[1]);
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in gt.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                        *a += b;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Nll { logp, targets } => {
                let ls = val(*logp).shape();
                let mut gl = Tensor::zeros(ls[0], ls[1]);
                let g0 = g.item();
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        gl.set(r, *t, -g0);
                    }
                }
                accumulate(grads, *logp, gl);
            }
            Op::Sum(x) => {
                let xs = val(*x).shape();
                accumulate(grads, *x, Tensor::filled(xs[0], xs[1], g.item()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::from_vec(1, g.cols(), out)
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

// ---- scalar kernels shared with the model code -------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs a positive argument");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for a in row.iter_mut() {
        *a = (*a - m).exp();
        total += *a;
    }
    for a in row.iter_mut() {
        *a /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        g.leaf(Tensor::from_vec(rows, cols, data.to_vec()))
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let z = leaf(&mut g, 1, 1, &[0.0]);
        let s = g.sigmoid(z);
        let ge = g.gelu(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(ge).item(), 0.0);
        let u = leaf(&mut g, 1, 3, &[0.0; 3]);
        let sm = g.softmax(u);
        for &p in g.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_times_constant_gradient() {
        let mut g = Graph::new();
        let w = leaf(&mut g, 1, 1, &[0.0]);
        let s = g.sigmoid(w);
        let y = g.scale(s, 4.0);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).item(), 1.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[4.0, 8.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss(1, 2))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 2, 3, &[0.0; 6]);
        let b = leaf(&mut g, 2, 3, &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.op, "matmul");
        assert_eq!(err.shapes, vec![[2, 3], [2, 3]]);
        assert!(err.to_string().contains("inner dimensions"));
        assert!(g.add_row(a, b).is_err());
        assert!(g.affine(a, b).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let s = leaf(&mut g, 3, 3, &[1.0, 5.0, 9.0, 2.0, 2.0, 7.0, 0.0, 1.0, 2.0]);
        let p = g.causal_softmax(s).unwrap();
        let v = g.value(p);
        assert_eq!(v.row_slice(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row_slice(1), &[0.5, 0.5, 0.0]);
        assert!((v.row_slice(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-6, 0.05, 0.6931, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
