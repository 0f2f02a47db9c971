//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is assembled once through a [`GraphBuilder`] and is immutable
//! afterwards. [`Graph::evaluate`] runs the forward pass for one set of leaf
//! bindings and returns an [`Evaluation`]; [`Graph::backward`] reverse-accumulates
//! the gradient of a scalar node with respect to every leaf. Evaluation state lives
//! in the returned values, so one graph can be evaluated with many binding sets.
//!
//! ```
//! use taco::autodiff::{Array, GraphBuilder};
//!
//! let mut g = GraphBuilder::new();
//! let x = g.leaf(&[]);
//! let y = g.leaf(&[]);
//! let xy = g.mul(x, y);
//! let graph = g.finish().unwrap();
//!
//! let (xv, yv) = (Array::scalar(2.0), Array::scalar(3.0));
//! let eval = graph.evaluate(&[&xv, &yv]).unwrap();
//! assert_eq!(eval.scalar(xy), 6.0);
//! let grads = graph.backward(&eval, xy).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[3.0]);
//! ```

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Inputs to `log` are floored at this value so that `log(0)` stays finite.
pub const LOG_FLOOR: f64 = 1e-300;

/// Dense row-major array. A scalar has an empty shape and one element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Structural(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Structural("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    /// Number of rows of a matrix (or length of a vector).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a matrix; 1 for vectors and scalars.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Array {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Array {
            shape: vec![rows.len(), c],
            data,
        }
    }

    fn add_assign(&mut self, other: &Array) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(usize),
    Constant(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    Broadcast(NodeId),
    Select(NodeId, Vec<Option<usize>>),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    LogSoftmaxRows(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MulScalar(..) => "mul_scalar",
            Op::DivScalar(..) => "div_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Broadcast(_) => "broadcast",
            Op::Select(..) => "select",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Records primitive operations. Shape errors are sticky: the first one is
/// reported by [`GraphBuilder::finish`].
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
    error: Option<Error>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn fail(&mut self, msg: String) -> NodeId {
        if self.error.is_none() {
            self.error = Some(Error::Structural(msg));
        }
        // Placeholder so construction can continue; finish() reports the error.
        self.push(Op::Constant(Array::scalar(0.0)), Vec::new(), false)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn node_shape(&self, id: NodeId) -> Vec<usize> {
        self.shape(id).to_vec()
    }

    /// A leaf bound at evaluation time. Leaves are numbered in creation order.
    pub fn leaf(&mut self, shape: &[usize]) -> NodeId {
        let idx = self.leaves.len();
        let id = self.push(Op::Leaf(idx), shape.to_vec(), true);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape.clone();
        self.push(Op::Constant(value), shape, false)
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        if self.shape(a) != self.shape(b) {
            let msg = format!(
                "{}: shapes {:?} and {:?} differ",
                op.name(),
                self.shape(a),
                self.shape(b)
            );
            return self.fail(msg);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.grad(a) || self.grad(b);
        self.push(op, shape, ng)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let ng = self.grad(a);
        self.push(op, shape, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(Op::Div(a, b), a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg(a), a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(a, factor), a)
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.unary(Op::Offset(a, shift), a)
    }

    fn with_scalar(&mut self, op: Op, a: NodeId, s: NodeId) -> NodeId {
        if numel(self.shape(s)) != 1 {
            let msg = format!("{}: second operand must be scalar", op.name());
            return self.fail(msg);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.grad(a) || self.grad(s);
        self.push(op, shape, ng)
    }

    /// `a * s` for a one-element node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.with_scalar(Op::MulScalar(a, s), a, s)
    }

    /// `a / s` for a one-element node `s`.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.with_scalar(Op::DivScalar(a, s), a, s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return self.fail(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let ng = self.grad(a) || self.grad(b);
        self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], ng)
    }

    fn row_op(&mut self, op: Op, a: NodeId, row: NodeId) -> NodeId {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(row).to_vec());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            let msg = format!("{}: cannot broadcast {sr:?} over rows of {sa:?}", op.name());
            return self.fail(msg);
        }
        let ng = self.grad(a) || self.grad(row);
        self.push(op, sa, ng)
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.row_op(Op::AddRow(a, row), a, row)
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.row_op(Op::MulRow(a, row), a, row)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    /// Numerically stable `log(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::LogSigmoid(a), a)
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square(a), a)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ng = self.grad(a);
        self.push(Op::Sum(a), Vec::new(), ng)
    }

    /// Row sums of a matrix, as a vector.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return self.fail(format!("sum_rows: expected a matrix, got {sa:?}"));
        }
        let ng = self.grad(a);
        self.push(Op::SumRows(a), vec![sa[0]], ng)
    }

    /// Repeats a one-element node into `shape`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        if numel(self.shape(a)) != 1 {
            return self.fail("broadcast: operand must be scalar".into());
        }
        let ng = self.grad(a);
        self.push(Op::Broadcast(a), shape.to_vec(), ng)
    }

    /// Gathers flat entries of `a`; `None` produces a zero. The result is a
    /// vector of `indices.len()` entries.
    pub fn select(&mut self, a: NodeId, indices: Vec<Option<usize>>) -> NodeId {
        let n = numel(self.shape(a));
        if let Some(bad) = indices.iter().flatten().find(|&&i| i >= n) {
            return self.fail(format!("select: index {bad} out of range for {n} entries"));
        }
        let ng = self.grad(a);
        let len = indices.len();
        self.push(Op::Select(a, indices), vec![len], ng)
    }

    /// Flat concatenation of the operands into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let len = parts.iter().map(|&p| numel(self.shape(p))).sum();
        let ng = parts.iter().any(|&p| self.grad(p));
        self.push(Op::Concat(parts.to_vec()), vec![len], ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        if numel(shape) != numel(self.shape(a)) {
            let msg = format!("reshape: {:?} to {:?}", self.shape(a), shape);
            return self.fail(msg);
        }
        let ng = self.grad(a);
        self.push(Op::Reshape(a), shape.to_vec(), ng)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return self.fail(format!("log_softmax_rows: expected a matrix, got {sa:?}"));
        }
        self.unary(Op::LogSoftmaxRows(a), a)
    }

    pub fn finish(self) -> Result<Graph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(Graph {
            nodes: self.nodes,
            leaves: self.leaves,
        })
    }
}

/// An immutable computation graph.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Forward values of every node for one binding set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Array>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].item()
    }
}

/// Gradient of a scalar seed with respect to every leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    per_leaf: Vec<Array>,
    leaves: Vec<NodeId>,
}

impl Gradients {
    /// Gradient for the leaf created `index`-th.
    pub fn leaf(&self, index: usize) -> &Array {
        &self.per_leaf[index]
    }

    /// Gradient for a leaf node. Panics if `node` is not a leaf.
    pub fn wrt(&self, node: NodeId) -> &Array {
        let idx = self
            .leaves
            .iter()
            .position(|&l| l == node)
            .expect("gradient requested for a non-leaf node");
        &self.per_leaf[idx]
    }

    pub fn into_leaves(self) -> Vec<Array> {
        self.per_leaf
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn matmul(a: &Array, b: &Array) -> Array {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array {
        shape: vec![m, n],
        data: out,
    }
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_shape(&self, index: usize) -> &[usize] {
        &self.nodes[self.leaves[index].0].shape
    }

    fn numeric(&self, id: usize, msg: &str) -> Error {
        Error::Numeric {
            node: format!("node {} ({})", id, self.nodes[id].op.name()),
            index: id,
            message: msg.to_string(),
        }
    }

    /// Forward pass. `bindings[i]` binds the `i`-th leaf.
    pub fn evaluate(&self, bindings: &[&Array]) -> Result<Evaluation> {
        if bindings.len() != self.leaves.len() {
            return Err(Error::Structural(format!(
                "{} leaves but {} bindings",
                self.leaves.len(),
                bindings.len()
            )));
        }
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = |n: &NodeId| &values[n.0];
            let out = match &node.op {
                Op::Leaf(i) => {
                    let b = bindings[*i];
                    if b.shape != node.shape {
                        return Err(Error::Structural(format!(
                            "leaf {} bound with shape {:?}, declared {:?}",
                            i, b.shape, node.shape
                        )));
                    }
                    b.clone()
                }
                Op::Constant(a) => a.clone(),
                Op::Add(a, b) => zip(v(a), v(b), |x, y| x + y),
                Op::Sub(a, b) => zip(v(a), v(b), |x, y| x - y),
                Op::Mul(a, b) => zip(v(a), v(b), |x, y| x * y),
                Op::Div(a, b) => {
                    if v(b).data.contains(&0.0) {
                        return Err(self.numeric(id, "division by zero"));
                    }
                    zip(v(a), v(b), |x, y| x / y)
                }
                Op::Neg(a) => map(v(a), |x| -x),
                Op::Scale(a, f) => map(v(a), |x| x * f),
                Op::Offset(a, s) => map(v(a), |x| x + s),
                Op::MulScalar(a, s) => {
                    let s = v(s).item();
                    map(v(a), |x| x * s)
                }
                Op::DivScalar(a, s) => {
                    let s = v(s).item();
                    if s == 0.0 || !s.is_finite() {
                        return Err(self.numeric(id, "division by zero or non-finite scalar"));
                    }
                    map(v(a), |x| x / s)
                }
                Op::MatMul(a, b) => matmul(v(a), v(b)),
                Op::AddRow(a, r) => {
                    let (a, r) = (v(a), v(r));
                    let n = r.data.len();
                    let mut out = a.clone();
                    for chunk in out.data.chunks_mut(n) {
                        for (o, &rv) in chunk.iter_mut().zip(&r.data) {
                            *o += rv;
                        }
                    }
                    out
                }
                Op::MulRow(a, r) => {
                    let (a, r) = (v(a), v(r));
                    let n = r.data.len();
                    let mut out = a.clone();
                    for chunk in out.data.chunks_mut(n) {
                        for (o, &rv) in chunk.iter_mut().zip(&r.data) {
                            *o *= rv;
                        }
                    }
                    out
                }
                Op::Tanh(a) => map(v(a), f64::tanh),
                Op::Sigmoid(a) => map(v(a), sigmoid),
                Op::LogSigmoid(a) => map(v(a), log_sigmoid),
                Op::Log(a) => {
                    if v(a).data.iter().any(|&x| x < 0.0 || x.is_nan()) {
                        return Err(self.numeric(id, "log of a negative or NaN input"));
                    }
                    map(v(a), |x| x.max(LOG_FLOOR).ln())
                }
                Op::Exp(a) => {
                    let out = map(v(a), f64::exp);
                    if !out.is_finite() {
                        return Err(self.numeric(id, "exp overflow"));
                    }
                    out
                }
                Op::Square(a) => map(v(a), |x| x * x),
                Op::Sum(a) => Array::scalar(v(a).data.iter().sum()),
                Op::SumRows(a) => {
                    let a = v(a);
                    let n = a.shape[1];
                    Array::vector(a.data.chunks(n).map(|c| c.iter().sum()).collect())
                }
                Op::Broadcast(a) => Array::filled(&node.shape, v(a).item()),
                Op::Select(a, idx) => {
                    let a = v(a);
                    Array::vector(
                        idx.iter()
                            .map(|i| i.map_or(0.0, |i| a.data[i]))
                            .collect(),
                    )
                }
                Op::Concat(parts) => {
                    let mut data = Vec::with_capacity(numel(&node.shape));
                    for p in parts {
                        data.extend_from_slice(&values[p.0].data);
                    }
                    Array::vector(data)
                }
                Op::Reshape(a) => Array {
                    shape: node.shape.clone(),
                    data: v(a).data.clone(),
                },
                Op::LogSoftmaxRows(a) => {
                    let a = v(a);
                    let n = a.shape[1];
                    let mut out = a.clone();
                    for row in out.data.chunks_mut(n) {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                        for x in row.iter_mut() {
                            *x -= lse;
                        }
                    }
                    out
                }
            };
            values.push(out);
        }
        Ok(Evaluation { values })
    }

    /// Reverse accumulation of `d seed / d leaf` for every leaf. Leaves the
    /// seed does not depend on get zero gradients.
    pub fn backward(&self, eval: &Evaluation, seed: NodeId) -> Result<Gradients> {
        if numel(&self.nodes[seed.0].shape) != 1 {
            return Err(Error::Structural(format!(
                "backward seed must be scalar, node {} has shape {:?}",
                seed.0, self.nodes[seed.0].shape
            )));
        }
        let vals = &eval.values;
        let mut grads: Vec<Option<Array>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Array::filled(&self.nodes[seed.0].shape, 1.0));

        fn acc(grads: &mut [Option<Array>], id: NodeId, g: Array) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=seed.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let ng = |n: &NodeId| self.nodes[n.0].needs_grad;
            match &node.op {
                Op::Leaf(_) => {
                    grads[id] = Some(gout);
                }
                Op::Constant(_) => {}
                Op::Add(a, b) => {
                    if ng(b) {
                        acc(&mut grads, *b, gout.clone());
                    }
                    if ng(a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(b) {
                        acc(&mut grads, *b, map(&gout, |x| -x));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(a) {
                        acc(&mut grads, *a, zip(&gout, &vals[b.0], |g, y| g * y));
                    }
                    if ng(b) {
                        acc(&mut grads, *b, zip(&gout, &vals[a.0], |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let bv = &vals[b.0];
                    if ng(a) {
                        acc(&mut grads, *a, zip(&gout, bv, |g, y| g / y));
                    }
                    if ng(b) {
                        let out = &vals[id];
                        let gb = Array {
                            shape: bv.shape.clone(),
                            data: gout
                                .data
                                .iter()
                                .zip(&out.data)
                                .zip(&bv.data)
                                .map(|((g, o), y)| -g * o / y)
                                .collect(),
                        };
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Neg(a) => acc(&mut grads, *a, map(&gout, |g| -g)),
                Op::Scale(a, f) => acc(&mut grads, *a, map(&gout, |g| g * f)),
                Op::Offset(a, _) => acc(&mut grads, *a, gout),
                Op::MulScalar(a, s) => {
                    let sv = vals[s.0].item();
                    if ng(s) {
                        let d: f64 = gout.data.iter().zip(&vals[a.0].data).map(|(g, x)| g * x).sum();
                        acc(&mut grads, *s, Array::filled(&self.nodes[s.0].shape, d));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, map(&gout, |g| g * sv));
                    }
                }
                Op::DivScalar(a, s) => {
                    let sv = vals[s.0].item();
                    if ng(s) {
                        let d: f64 = gout.data.iter().zip(&vals[id].data).map(|(g, o)| -g * o / sv).sum();
                        acc(&mut grads, *s, Array::filled(&self.nodes[s.0].shape, d));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, map(&gout, |g| g / sv));
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                    if ng(a) {
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &gout.data[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv.data[p * n..(p + 1) * n];
                                ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        acc(&mut grads, *a, Array { shape: vec![m, k], data: ga });
                    }
                    if ng(b) {
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &gout.data[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av.data[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * g;
                                }
                            }
                        }
                        acc(&mut grads, *b, Array { shape: vec![k, n], data: gb });
                    }
                }
                Op::AddRow(a, r) => {
                    if ng(r) {
                        let n = self.nodes[r.0].shape[0];
                        let mut gr = vec![0.0; n];
                        for chunk in gout.data.chunks(n) {
                            for (o, g) in gr.iter_mut().zip(chunk) {
                                *o += g;
                            }
                        }
                        acc(&mut grads, *r, Array::vector(gr));
                    }
                    if ng(a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (&vals[a.0], &vals[r.0]);
                    let n = rv.data.len();
                    if ng(r) {
                        let mut gr = vec![0.0; n];
                        for (gchunk, achunk) in gout.data.chunks(n).zip(av.data.chunks(n)) {
                            for ((o, g), x) in gr.iter_mut().zip(gchunk).zip(achunk) {
                                *o += g * x;
                            }
                        }
                        acc(&mut grads, *r, Array::vector(gr));
                    }
                    if ng(a) {
                        let mut ga = gout;
                        for chunk in ga.data.chunks_mut(n) {
                            for (o, &y) in chunk.iter_mut().zip(&rv.data) {
                                *o *= y;
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip(&gout, &vals[id], |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&gout, &vals[id], |g, y| g * y * (1.0 - y))),
                Op::LogSigmoid(a) => {
                    acc(&mut grads, *a, zip(&gout, &vals[a.0], |g, x| g * sigmoid(-x)))
                }
                Op::Log(a) => acc(
                    &mut grads,
                    *a,
                    zip(&gout, &vals[a.0], |g, x| if x < LOG_FLOOR { 0.0 } else { g / x }),
                ),
                Op::Exp(a) => acc(&mut grads, *a, zip(&gout, &vals[id], |g, y| g * y)),
                Op::Square(a) => acc(&mut grads, *a, zip(&gout, &vals[a.0], |g, x| 2.0 * g * x)),
                Op::Sum(a) => {
                    let g = gout.item();
                    acc(&mut grads, *a, Array::filled(&self.nodes[a.0].shape, g));
                }
                Op::SumRows(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let n = shape[1];
                    let data = gout.data.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
                    acc(&mut grads, *a, Array { shape, data });
                }
                Op::Broadcast(a) => {
                    let g: f64 = gout.data.iter().sum();
                    acc(&mut grads, *a, Array::filled(&self.nodes[a.0].shape, g));
                }
                Op::Select(a, idx) => {
                    let mut ga = Array::zeros(&self.nodes[a.0].shape);
                    for (i, g) in idx.iter().zip(&gout.data) {
                        if let Some(i) = i {
                            ga.data[*i] += g;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].shape.clone();
                        let len = numel(&shape);
                        if ng(p) {
                            let data = gout.data[offset..offset + len].to_vec();
                            acc(&mut grads, *p, Array { shape, data });
                        }
                        offset += len;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    acc(&mut grads, *a, Array { shape, data: gout.data });
                }
                Op::LogSoftmaxRows(a) => {
                    let out = &vals[id];
                    let n = out.shape[1];
                    let mut ga = gout;
                    for (grow, orow) in ga.data.chunks_mut(n).zip(out.data.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for (g, o) in grow.iter_mut().zip(orow) {
                            *g -= o.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }

        let per_leaf = self
            .leaves
            .iter()
            .map(|&l| {
                grads
                    .get_mut(l.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array::zeros(&self.nodes[l.0].shape))
            })
            .collect();
        Ok(Gradients {
            per_leaf,
            leaves: self.leaves.clone(),
        })
    }
}

/// Compares the analytic gradient of scalar `output` with respect to leaf
/// `leaf` against central differences. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over the leaf's entries.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &[&Array],
    output: NodeId,
    leaf: usize,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Structural("finite-difference step must be positive".into()));
    }
    let eval = graph.evaluate(bindings)?;
    let analytic = graph.backward(&eval, output)?.leaf(leaf).clone();
    let mut perturbed = bindings[leaf].clone();
    let mut worst: f64 = 0.0;
    for i in 0..perturbed.len() {
        let orig = perturbed.data[i];
        let eval_at = |x: f64, p: &mut Array| -> Result<f64> {
            p.data[i] = x;
            let mut b: Vec<&Array> = bindings.to_vec();
            b[leaf] = p;
            Ok(graph.evaluate(&b)?.scalar(output))
        };
        let plus = eval_at(orig + step, &mut perturbed)?;
        let minus = eval_at(orig - step, &mut perturbed)?;
        perturbed.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(f: impl Fn(&mut GraphBuilder, NodeId) -> NodeId) -> (Graph, NodeId, NodeId) {
        let mut g = GraphBuilder::new();
        let x = g.leaf(&[]);
        let y = f(&mut g, x);
        (g.finish().unwrap(), x, y)
    }

    #[test]
    fn product_and_its_gradient() {
        let mut g = GraphBuilder::new();
        let x = g.leaf(&[]);
        let y = g.leaf(&[]);
        let p = g.mul(x, y);
        let graph = g.finish().unwrap();
        let (xv, yv) = (Array::scalar(2.0), Array::scalar(3.0));
        let eval = graph.evaluate(&[&xv, &yv]).unwrap();
        assert_eq!(eval.scalar(p), 6.0);
        let grads = graph.backward(&eval, p).unwrap();
        assert_eq!(grads.leaf(0).item(), 3.0);
        assert_eq!(grads.leaf(1).item(), 2.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (graph, x, y) = scalar_graph(|g, x| g.sigmoid(x));
        let z = Array::scalar(0.0);
        let eval = graph.evaluate(&[&z]).unwrap();
        assert_eq!(eval.scalar(y), 0.5);
        assert_eq!(graph.backward(&eval, y).unwrap().wrt(x).item(), 0.25);
    }

    #[test]
    fn log_sum_exp_of_zeros() {
        let mut g = GraphBuilder::new();
        let x = g.leaf(&[2]);
        let e = g.exp(x);
        let s = g.sum(e);
        let l = g.log(s);
        let graph = g.finish().unwrap();
        let v = Array::vector(vec![0.0, 0.0]);
        let eval = graph.evaluate(&[&v]).unwrap();
        assert!((eval.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut g = GraphBuilder::new();
        let a = g.leaf(&[2]);
        let b = g.leaf(&[3]);
        g.add(a, b);
        assert!(matches!(g.finish(), Err(Error::Structural(_))));

        let mut g = GraphBuilder::new();
        let a = g.leaf(&[2]);
        let graph = g.finish().unwrap();
        let wrong = Array::vector(vec![1.0; 3]);
        assert!(matches!(graph.evaluate(&[&wrong]), Err(Error::Structural(_))));
        let _ = a;
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut g = GraphBuilder::new();
        let a = g.leaf(&[2]);
        let t = g.tanh(a);
        let graph = g.finish().unwrap();
        let v = Array::vector(vec![0.1, 0.2]);
        let eval = graph.evaluate(&[&v]).unwrap();
        assert!(matches!(graph.backward(&eval, t), Err(Error::Structural(_))));
    }

    #[test]
    fn log_floor_keeps_zero_finite_and_negative_errors() {
        let (graph, _, y) = scalar_graph(|g, x| g.log(x));
        let eval = graph.evaluate(&[&Array::scalar(0.0)]).unwrap();
        assert_eq!(eval.scalar(y), LOG_FLOOR.ln());
        let err = graph.evaluate(&[&Array::scalar(-1.0)]).unwrap_err();
        match err {
            Error::Numeric { node, .. } => assert!(node.contains("log")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exp_overflow_names_node() {
        let (graph, _, _) = scalar_graph(|g, x| g.exp(x));
        let err = graph.evaluate(&[&Array::scalar(1000.0)]).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref node, .. } if node.contains("exp")));
    }

    #[test]
    fn linear_graph_is_exact_under_finite_differences() {
        let mut g = GraphBuilder::new();
        let w = g.leaf(&[3]);
        let x = g.constant(Array::vector(vec![0.5, -2.0, 4.0]));
        let p = g.mul(w, x);
        let s = g.sum(p);
        let graph = g.finish().unwrap();
        let wv = Array::vector(vec![1.0, 2.0, 3.0]);
        let err = finite_difference_check(&graph, &[&wv], s, 0, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn select_with_gaps_and_concat() {
        let mut g = GraphBuilder::new();
        let a = g.leaf(&[3]);
        let b = g.leaf(&[2]);
        let c = g.concat(&[a, b]);
        let s = g.select(c, vec![None, Some(4), Some(0), Some(4)]);
        let sq = g.square(s);
        let out = g.sum(sq);
        let graph = g.finish().unwrap();
        let av = Array::vector(vec![1.0, 2.0, 3.0]);
        let bv = Array::vector(vec![5.0, 7.0]);
        let eval = graph.evaluate(&[&av, &bv]).unwrap();
        assert_eq!(eval.value(s).data(), &[0.0, 7.0, 1.0, 7.0]);
        let grads = graph.backward(&eval, out).unwrap();
        assert_eq!(grads.leaf(0).data(), &[2.0, 0.0, 0.0]);
        assert_eq!(grads.leaf(1).data(), &[0.0, 28.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = GraphBuilder::new();
        let a = g.leaf(&[2]);
        let _unused = g.leaf(&[2, 2]);
        let s = g.sum(a);
        let graph = g.finish().unwrap();
        let av = Array::vector(vec![1.0, 2.0]);
        let bv = Array::zeros(&[2, 2]);
        let eval = graph.evaluate(&[&av, &bv]).unwrap();
        let grads = graph.backward(&eval, s).unwrap();
        assert_eq!(grads.leaf(1), &Array::zeros(&[2, 2]));
    }
}
