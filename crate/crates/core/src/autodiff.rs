//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents are
//! already on the tape, so the insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are meant to be
//! rebuilt for every training step.
//!
//! ```
//! use dfm::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[6.0]);
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// SeLU scale constants.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-D operand, got shape {shape:?}")]
    NotMatrix { op: OpKind, shape: Vec<usize> },
    #[error("shape {shape:?} does not describe {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: OpKind, index: usize },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: needs at least one operand")]
    NoOperands { op: OpKind },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches
    /// and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != data.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite {
                op: OpKind::Leaf,
                index,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AutodiffError::BadShape {
                    shape: vec![rows.len(), cols],
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::matrix(values.len(), 1, values.to_vec())
    }

    // Internal constructor for op outputs; finiteness is checked by the graph.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns of a matrix (the length for vectors).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::raw(vec![idx.len(), c], data)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(AutodiffError::NoOperands {
            op: OpKind::Concat,
        })?;
        let n = first.rows();
        for p in parts {
            if p.shape.len() != 2 {
                return Err(AutodiffError::NotMatrix {
                    op: OpKind::Concat,
                    shape: p.shape.clone(),
                });
            }
            if p.rows() != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: OpKind::Concat,
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor::raw(vec![n, total], data))
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn vcat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(AutodiffError::NoOperands {
            op: OpKind::Concat,
        })?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c || p.shape.len() != 2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: OpKind::Concat,
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows();
        }
        Ok(Tensor::raw(vec![rows, c], data))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor::raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    fn accumulate(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x W^T + b` for `x: n x in`, `w: out x in`, `b: 1 x out`.
pub(crate) fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, inp, out) = (x.rows(), x.cols(), w.rows());
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(&b.data);
    }
    gemm(n, inp, out, &x.data, false, &w.data, true, 1.0, &mut y);
    Tensor::raw(vec![n, out], y)
}

#[inline]
pub(crate) fn selu(v: f64) -> f64 {
    if v > 0.0 {
        SELU_LAMBDA * v
    } else {
        SELU_LAMBDA * SELU_ALPHA * v.exp_m1()
    }
}

#[inline]
fn selu_grad(v: f64) -> f64 {
    if v > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * v.exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Linear,
    Concat,
    Selu,
    Exp,
    Square,
    Sum,
    SumRows,
    Mean,
    SqNorm,
    MaxConst,
    Custom,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "elementwise-multiply",
            OpKind::Scale => "scalar-multiply",
            OpKind::MatMul => "matrix-multiply",
            OpKind::Linear => "linear",
            OpKind::Concat => "concatenate",
            OpKind::Selu => "selu",
            OpKind::Exp => "exponential",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::SumRows => "sum-rows",
            OpKind::Mean => "mean",
            OpKind::SqNorm => "squared-l2-norm",
            OpKind::MaxConst => "maximum-with-constant",
            OpKind::Custom => "custom",
        };
        f.write_str(name)
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` returns one gradient per input, shaped like that input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Scale(Node, f64),
    MatMul(Node, Node),
    Linear { x: Node, w: Node, b: Node },
    Concat(Vec<Node>),
    Selu(Node),
    Exp(Node),
    Square(Node),
    Sum(Node),
    SumRows(Node),
    Mean(Node),
    SqNorm(Node),
    MaxConst(Node, f64),
    Custom(Vec<Node>, Box<dyn CustomOp>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Concat(..) => OpKind::Concat,
            Op::Selu(..) => OpKind::Selu,
            Op::Exp(..) => OpKind::Exp,
            Op::Square(..) => OpKind::Square,
            Op::Sum(..) => OpKind::Sum,
            Op::SumRows(..) => OpKind::SumRows,
            Op::Mean(..) => OpKind::Mean,
            Op::SqNorm(..) => OpKind::SqNorm,
            Op::MaxConst(..) => OpKind::MaxConst,
            Op::Custom(..) => OpKind::Custom,
        }
    }

    fn parents(&self) -> Vec<Node> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Concat(ps) | Op::Custom(ps, _) => ps.clone(),
            Op::Scale(a, _)
            | Op::Selu(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::Mean(a)
            | Op::SqNorm(a)
            | Op::MaxConst(a, _) => vec![*a],
        }
    }
}

struct NodeData {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Node {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Node {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Node {
        self.nodes.push(NodeData {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Node(self.nodes.len() - 1)
    }

    pub fn value(&self, n: Node) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn op_kind(&self, n: Node) -> OpKind {
        self.nodes[n.0].op.kind()
    }

    pub fn parents(&self, n: Node) -> Vec<Node> {
        self.nodes[n.0].op.parents()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Node> {
        if let Some(index) = value.first_non_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.kind(),
                index,
            });
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(NodeData {
            value,
            op,
            requires_grad,
        });
        Ok(Node(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: OpKind, a: Node, b: Node) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn require_matrix(&self, op: OpKind, a: Node) -> Result<()> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(AutodiffError::NotMatrix {
                op,
                shape: s.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape(OpKind::Add, a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape(OpKind::Sub, a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape(OpKind::Mul, a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Result<Node> {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.require_matrix(OpKind::MatMul, a)?;
        self.require_matrix(OpKind::MatMul, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        self.push(Op::MatMul(a, b), Tensor::raw(vec![m, n], out))
    }

    /// Fused affine map `x W^T + b` with `w: out x in` and `b: 1 x out`.
    pub fn linear(&mut self, x: Node, w: Node, b: Node) -> Result<Node> {
        for n in [x, w, b] {
            self.require_matrix(OpKind::Linear, n)?;
        }
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols() != tw.cols() || tb.rows() != 1 || tb.cols() != tw.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Linear,
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let v = affine(tx, tw, tb);
        self.push(Op::Linear { x, w, b }, v)
    }

    /// Concatenates matrices along columns.
    pub fn concat(&mut self, parts: &[Node]) -> Result<Node> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::hcat(&tensors)?;
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn selu(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(selu);
        self.push(Op::Selu(a), v)
    }

    pub fn exp(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn square(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Node) -> Result<Node> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Row sums of a matrix, as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Node) -> Result<Node> {
        self.require_matrix(OpKind::SumRows, a)?;
        let t = self.value(a);
        let sums = t.rows_iter().map(|r| r.iter().sum()).collect();
        let v = Tensor::raw(vec![t.rows(), 1], sums);
        self.push(Op::SumRows(a), v)
    }

    pub fn mean(&mut self, a: Node) -> Result<Node> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Squared L2 norm of the whole tensor.
    pub fn sq_norm(&mut self, a: Node) -> Result<Node> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Op::SqNorm(a), Tensor::scalar(s))
    }

    /// `max(a, c)` elementwise; ties belong to the variable branch.
    pub fn max_const(&mut self, a: Node, c: f64) -> Result<Node> {
        let v = self.value(a).map(|x| if x >= c { x } else { c });
        self.push(Op::MaxConst(a, c), v)
    }

    pub fn custom(&mut self, inputs: &[Node], op: Box<dyn CustomOp>) -> Result<Node> {
        if inputs.is_empty() {
            return Err(AutodiffError::NoOperands {
                op: OpKind::Custom,
            });
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
        let v = op.forward(&tensors)?;
        self.push(Op::Custom(inputs.to_vec(), op), v)
    }

    /// Reverse sweep from a scalar root. Gradients of every node reachable
    /// from the root are accumulated; the rest read as zero.
    pub fn backward(&self, root: Node) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::raw(rv.shape().to_vec(), vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &NodeData, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |n: Node| &self.nodes[n.0].value;
        let mut send = |n: Node, g: Tensor| {
            if !self.nodes[n.0].requires_grad {
                return;
            }
            match &mut grads[n.0] {
                Some(acc) => acc.accumulate(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gout.clone());
                send(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                send(*a, gout.clone());
                send(*b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                send(*a, gout.zip(val(*b), |g, y| g * y));
                send(*b, gout.zip(val(*a), |g, x| g * x));
            }
            Op::Scale(a, c) => send(*a, gout.map(|g| g * c)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, gout.data(), false, tb.data(), true, 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, gout.data(), false, 0.0, &mut gb);
                send(*a, Tensor::raw(vec![m, k], ga));
                send(*b, Tensor::raw(vec![k, n], gb));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, inp, out) = (tx.rows(), tx.cols(), tw.rows());
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; n * inp];
                    gemm(n, out, inp, gout.data(), false, tw.data(), false, 0.0, &mut gx);
                    send(*x, Tensor::raw(vec![n, inp], gx));
                }
                let mut gw = vec![0.0; out * inp];
                gemm(out, n, inp, gout.data(), true, tx.data(), false, 0.0, &mut gw);
                send(*w, Tensor::raw(vec![out, inp], gw));
                let mut gb = vec![0.0; out];
                for r in gout.rows_iter() {
                    for (acc, g) in gb.iter_mut().zip(r) {
                        *acc += g;
                    }
                }
                send(*b, Tensor::raw(vec![1, out], gb));
            }
            Op::Concat(parts) => {
                let n = gout.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut g = Vec::with_capacity(n * c);
                    for r in gout.rows_iter() {
                        g.extend_from_slice(&r[offset..offset + c]);
                    }
                    offset += c;
                    send(p, Tensor::raw(vec![n, c], g));
                }
            }
            Op::Selu(a) => send(*a, gout.zip(val(*a), |g, x| g * selu_grad(x))),
            Op::Exp(a) => send(*a, gout.zip(&node.value, |g, y| g * y)),
            Op::Square(a) => send(*a, gout.zip(val(*a), |g, x| 2.0 * g * x)),
            Op::Sum(a) => {
                let g = gout.item();
                send(*a, Tensor::filled(val(*a).shape(), g));
            }
            Op::SumRows(a) => {
                let t = val(*a);
                let c = t.cols();
                let mut g = Vec::with_capacity(t.len());
                for &gi in gout.data() {
                    g.extend(std::iter::repeat_n(gi, c));
                }
                send(*a, Tensor::raw(t.shape().to_vec(), g));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let g = gout.item() / t.len() as f64;
                send(*a, Tensor::filled(t.shape(), g));
            }
            Op::SqNorm(a) => {
                let g = gout.item();
                send(*a, val(*a).map(|x| 2.0 * g * x));
            }
            Op::MaxConst(a, c) => {
                send(*a, gout.zip(val(*a), |g, x| if x >= *c { g } else { 0.0 }));
            }
            Op::Custom(inputs, op) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&p| val(p)).collect();
                let gs = op.backward(&tensors, &node.value, gout);
                for (&p, g) in inputs.iter().zip(gs) {
                    send(p, g);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `n`; zero when `n` does not
    /// influence the root.
    pub fn get(&self, n: Node) -> Tensor {
        self.get_ref(n)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[n.0]))
    }

    pub fn get_ref(&self, n: Node) -> Option<&Tensor> {
        self.grads.get(n.0).and_then(Option::as_ref)
    }
}

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point.
/// The result is `max_i |g_i - fd_i| / (|g_i| + 1e-8)`.
pub fn finite_diff_check<F, E>(f: F, point: &[f64], step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&[f64]) -> std::result::Result<(f64, Vec<f64>), E>,
{
    let (_, analytic) = f(point)?;
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (up, _) = f(&probe)?;
        probe[i] = point[i] - step;
        let (down, _) = f(&probe)?;
        probe[i] = point[i];
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8));
    }
    Ok(worst)
}
