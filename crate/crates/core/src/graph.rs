//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only list of nodes; builder methods only reference
//! earlier nodes, so index order is a topological order. `forward` binds the
//! input roots and caches every node value, `backward` walks the node list in
//! strict reverse order accumulating adjoints. Both passes are fully
//! deterministic: repeated runs on the same graph and bindings produce
//! bit-identical values and gradients.
//!
//! Shape checking happens at node-construction time; value-level failures
//! (non-finite intermediates, unbound roots) surface at evaluation time.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operation kinds, used for error reporting and for enumerating the
/// differentiable surface in gradient-check harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    SubRow,
    MulRow,
    DivRow,
    ColMean,
    ColMax,
    Relu,
    Abs,
    Tanh,
    Sqrt,
    AddScalar,
    MulScalar,
    SumAll,
    SoftmaxCrossEntropy,
}

/// Every op kind with a derivative, i.e. everything except the leaf kinds.
pub const DIFFERENTIABLE_OPS: &[OpKind] = &[
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::AddRow,
    OpKind::SubRow,
    OpKind::MulRow,
    OpKind::DivRow,
    OpKind::ColMean,
    OpKind::ColMax,
    OpKind::Relu,
    OpKind::Abs,
    OpKind::Tanh,
    OpKind::Sqrt,
    OpKind::AddScalar,
    OpKind::MulScalar,
    OpKind::SumAll,
    OpKind::SoftmaxCrossEntropy,
];

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    DivRow(NodeId, NodeId),
    ColMean(NodeId),
    ColMax(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    SumAll(NodeId),
    SoftmaxCrossEntropy(NodeId, NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubRow(a, b)
            | Op::MulRow(a, b)
            | Op::DivRow(a, b)
            | Op::SoftmaxCrossEntropy(a, b) => vec![*a, *b],
            Op::ColMean(a)
            | Op::ColMax(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Tanh(a)
            | Op::Sqrt(a)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::SumAll(a) => vec![*a],
        }
    }

    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Constant(_) => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::SubRow(..) => OpKind::SubRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::DivRow(..) => OpKind::DivRow,
            Op::ColMean(_) => OpKind::ColMean,
            Op::ColMax(_) => OpKind::ColMax,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::SumAll(_) => OpKind::SumAll,
            Op::SoftmaxCrossEntropy(..) => OpKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op:?}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op:?}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: OpKind, shape: Vec<usize> },
    #[error("output node must be scalar, got shape {0:?}")]
    OutputNotScalar(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("root node {0:?} not bound")]
    UnboundRoot(NodeId),
    #[error("binding for node {node:?} has shape {got:?}, declared {want:?}")]
    BindingShape {
        node: NodeId,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("node {node:?} ({kind:?}) produced a non-finite value: {source}")]
    NonFinite {
        node: NodeId,
        kind: OpKind,
        source: TensorError,
    },
    #[error("no output node designated")]
    NoOutput,
    #[error("backward requires a completed forward pass")]
    ForwardNotRun,
}

/// Gradients of the scalar output with respect to every root, in root
/// creation order. Roots not reached by the backward sweep hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_root: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, root: NodeId) -> &Tensor {
        self.by_root
            .get(&root)
            .unwrap_or_else(|| panic!("node {root:?} is not a gradient-tracked root"))
    }

    pub fn len(&self) -> usize {
        self.by_root.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_root.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    /// Whether the node lies on a path from a gradient-tracked root; the
    /// backward sweep computes adjoints only for these.
    requires: Vec<bool>,
    values: Vec<Option<Tensor>>,
    adjoints: Vec<Option<Tensor>>,
    roots: Vec<NodeId>,
    output: Option<NodeId>,
    forward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        crate::alloc_tuning::tune_for_tensor_churn();
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires = match &op {
            Op::Input | Op::Constant(_) => false,
            other => other.inputs().iter().any(|id| self.requires[id.0]),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(op);
        self.shapes.push(shape);
        self.requires.push(requires);
        self.values.push(None);
        self.adjoints.push(None);
        id
    }

    /// A gradient-tracked root bound at forward time (a parameter).
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Input, shape.to_vec());
        self.requires[id.0] = true;
        self.roots.push(id);
        id
    }

    /// A root bound at forward time that never receives a gradient (batch
    /// data, targets, per-step noise). The backward sweep prunes work that
    /// only feeds such roots.
    pub fn data_input(&mut self, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Input, shape.to_vec());
        self.roots.push(id);
        id
    }

    /// A baked-in constant. Not a root; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    fn require_matrix(&self, op: OpKind, id: NodeId) -> Result<(usize, usize), GraphError> {
        let s = &self.shapes[id.0];
        if s.len() != 2 {
            return Err(GraphError::NotMatrix {
                op,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: OpKind, a: NodeId, b: NodeId) -> Result<Vec<usize>, GraphError> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: self.shapes[a.0].clone(),
                rhs: self.shapes[b.0].clone(),
            });
        }
        Ok(self.shapes[a.0].clone())
    }

    fn row_op(&self, op: OpKind, a: NodeId, row: NodeId) -> Result<Vec<usize>, GraphError> {
        let (_, d) = self.require_matrix(op, a)?;
        let (r, rd) = self.require_matrix(op, row)?;
        if r != 1 || rd != d {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: self.shapes[a.0].clone(),
                rhs: self.shapes[row.0].clone(),
            });
        }
        Ok(self.shapes[a.0].clone())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, ka) = self.require_matrix(OpKind::MatMul, a)?;
        let (kb, n) = self.require_matrix(OpKind::MatMul, b)?;
        if ka != kb {
            return Err(GraphError::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: self.shapes[a.0].clone(),
                rhs: self.shapes[b.0].clone(),
            });
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape(OpKind::Add, a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape(OpKind::Sub, a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape(OpKind::Mul, a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// `a + row` broadcast over rows; `row` must be `[1, d]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let s = self.row_op(OpKind::AddRow, a, row)?;
        Ok(self.push(Op::AddRow(a, row), s))
    }

    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let s = self.row_op(OpKind::SubRow, a, row)?;
        Ok(self.push(Op::SubRow(a, row), s))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let s = self.row_op(OpKind::MulRow, a, row)?;
        Ok(self.push(Op::MulRow(a, row), s))
    }

    pub fn div_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let s = self.row_op(OpKind::DivRow, a, row)?;
        Ok(self.push(Op::DivRow(a, row), s))
    }

    /// Column means of an `[m, d]` matrix, producing `[1, d]`.
    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let (_, d) = self.require_matrix(OpKind::ColMean, a)?;
        Ok(self.push(Op::ColMean(a), vec![1, d]))
    }

    /// Column maxima of an `[m, d]` matrix, producing `[1, d]`. The backward
    /// pass routes the adjoint to the first maximal row per column.
    pub fn col_max(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let (_, d) = self.require_matrix(OpKind::ColMax, a)?;
        Ok(self.push(Op::ColMax(a), vec![1, d]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a.0].clone();
        self.push(Op::Relu(a), s)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a.0].clone();
        self.push(Op::Abs(a), s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a.0].clone();
        self.push(Op::Tanh(a), s)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a.0].clone();
        self.push(Op::Sqrt(a), s)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shapes[a.0].clone();
        self.push(Op::AddScalar(a, c), s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shapes[a.0].clone();
        self.push(Op::MulScalar(a, c), s)
    }

    /// Sum of all entries, producing `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![1])
    }

    /// Mean over rows of the softmax cross-entropy between `[m, c]` logits and
    /// `[m, c]` one-hot (or soft) targets, producing `[1]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: NodeId,
    ) -> Result<NodeId, GraphError> {
        let a = self.require_matrix(OpKind::SoftmaxCrossEntropy, logits)?;
        let b = self.require_matrix(OpKind::SoftmaxCrossEntropy, targets)?;
        if a != b {
            return Err(GraphError::ShapeMismatch {
                op: OpKind::SoftmaxCrossEntropy,
                lhs: self.shapes[logits.0].clone(),
                rhs: self.shapes[targets.0].clone(),
            });
        }
        Ok(self.push(Op::SoftmaxCrossEntropy(logits, targets), vec![1]))
    }

    pub fn mark_output(&mut self, id: NodeId) -> Result<(), GraphError> {
        if self.shapes[id.0].iter().product::<usize>() != 1 {
            return Err(GraphError::OutputNotScalar(self.shapes[id.0].clone()));
        }
        self.output = Some(id);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Runs the forward pass with the given root bindings and returns the
    /// scalar output. All node values are cached for inspection.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor)]) -> Result<f64, EvalError> {
        let out = self.output.ok_or(EvalError::NoOutput)?;
        self.forward_done = false;
        for v in &mut self.values {
            *v = None;
        }
        for a in &mut self.adjoints {
            *a = None;
        }
        for (id, t) in bindings {
            if t.shape() != self.shapes[id.0].as_slice() {
                return Err(EvalError::BindingShape {
                    node: *id,
                    got: t.shape().to_vec(),
                    want: self.shapes[id.0].clone(),
                });
            }
            self.values[id.0] = Some(t.clone());
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i], Op::Input) {
                if self.values[i].is_none() {
                    return Err(EvalError::UnboundRoot(NodeId(i)));
                }
                continue;
            }
            let value = self.compute(i)?;
            self.values[i] = Some(value);
        }
        self.forward_done = true;
        Ok(self.values[out.0].as_ref().unwrap().data()[0])
    }

    /// Cached value of a node after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }

    /// Adjoint of a node after `backward` (None if the node does not reach
    /// the output).
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints[id.0].as_ref()
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("value computed")
    }

    fn compute(&self, i: usize) -> Result<Tensor, EvalError> {
        let node = &self.nodes[i];
        let kind = node.kind();
        let result = match node {
            Op::Input => unreachable!("inputs are bound, not computed"),
            Op::Constant(t) => Ok(t.clone()),
            Op::MatMul(a, b) => matmul(self.val(*a), false, self.val(*b), false),
            Op::Add(a, b) => zip(self.val(*a), self.val(*b), |x, y| x + y),
            Op::Sub(a, b) => zip(self.val(*a), self.val(*b), |x, y| x - y),
            Op::Mul(a, b) => zip(self.val(*a), self.val(*b), |x, y| x * y),
            Op::AddRow(a, r) => row_zip(self.val(*a), self.val(*r), |x, y| x + y),
            Op::SubRow(a, r) => row_zip(self.val(*a), self.val(*r), |x, y| x - y),
            Op::MulRow(a, r) => row_zip(self.val(*a), self.val(*r), |x, y| x * y),
            Op::DivRow(a, r) => row_zip(self.val(*a), self.val(*r), |x, y| x / y),
            Op::ColMean(a) => col_mean(self.val(*a)),
            Op::ColMax(a) => col_max(self.val(*a)),
            Op::Relu(a) => map(self.val(*a), |x| x.max(0.0)),
            Op::Abs(a) => map(self.val(*a), f64::abs),
            Op::Tanh(a) => map(self.val(*a), f64::tanh),
            Op::Sqrt(a) => map(self.val(*a), f64::sqrt),
            Op::AddScalar(a, c) => map(self.val(*a), |x| x + c),
            Op::MulScalar(a, c) => map(self.val(*a), |x| x * c),
            Op::SumAll(a) => Tensor::new(vec![1], vec![self.val(*a).data().iter().sum()]),
            Op::SoftmaxCrossEntropy(l, t) => softmax_ce(self.val(*l), self.val(*t)),
        };
        result.map_err(|source| EvalError::NonFinite {
            node: NodeId(i),
            kind,
            source,
        })
    }

    /// Reverse sweep. Returns the gradient of the scalar output with respect
    /// to every root; roots the output does not depend on get zero gradients.
    pub fn backward(&mut self) -> Result<Gradients, EvalError> {
        let out = self.output.ok_or(EvalError::NoOutput)?;
        if !self.forward_done {
            return Err(EvalError::ForwardNotRun);
        }
        for a in &mut self.adjoints {
            *a = None;
        }
        self.adjoints[out.0] = Some(Tensor::scalar(1.0).unwrap());
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.adjoints[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.adjoints[i] = Some(g);
        }
        let mut by_root = HashMap::new();
        for &r in &self.roots {
            if !self.requires[r.0] {
                continue;
            }
            let grad = match &self.adjoints[r.0] {
                Some(t) => t.clone(),
                None => Tensor::zeros(&self.shapes[r.0]),
            };
            by_root.insert(r, grad);
        }
        Ok(Gradients { by_root })
    }

    fn accumulate(&mut self, id: NodeId, contrib: Tensor) {
        match &mut self.adjoints[id.0] {
            Some(existing) => {
                let data = existing.data_mut();
                for (e, c) in data.iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<(), EvalError> {
        let node = self.nodes[i].clone();
        let kind = node.kind();
        let wrap = |source: TensorError| EvalError::NonFinite {
            node: NodeId(i),
            kind,
            source,
        };
        match node {
            Op::Input | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                if self.requires[a.0] {
                    let da = matmul(g, false, self.val(b), true).map_err(wrap)?;
                    self.accumulate(a, da);
                }
                if self.requires[b.0] {
                    let db = matmul(self.val(a), true, g, false).map_err(wrap)?;
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires[a.0] {
                    self.accumulate(a, g.clone());
                }
                if self.requires[b.0] {
                    self.accumulate(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.requires[a.0] {
                    self.accumulate(a, g.clone());
                }
                if self.requires[b.0] {
                    let neg = map(g, |x| -x).map_err(wrap)?;
                    self.accumulate(b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.requires[a.0] {
                    let da = zip(g, self.val(b), |x, y| x * y).map_err(wrap)?;
                    self.accumulate(a, da);
                }
                if self.requires[b.0] {
                    let db = zip(g, self.val(a), |x, y| x * y).map_err(wrap)?;
                    self.accumulate(b, db);
                }
            }
            Op::AddRow(a, r) => {
                if self.requires[a.0] {
                    self.accumulate(a, g.clone());
                }
                if self.requires[r.0] {
                    self.accumulate(r, col_sum(g).map_err(wrap)?);
                }
            }
            Op::SubRow(a, r) => {
                if self.requires[a.0] {
                    self.accumulate(a, g.clone());
                }
                if self.requires[r.0] {
                    let neg = map(&col_sum(g).map_err(wrap)?, |x| -x).map_err(wrap)?;
                    self.accumulate(r, neg);
                }
            }
            Op::MulRow(a, r) => {
                if self.requires[a.0] {
                    let da = row_zip(g, self.val(r), |x, y| x * y).map_err(wrap)?;
                    self.accumulate(a, da);
                }
                if self.requires[r.0] {
                    let ga = zip(g, self.val(a), |x, y| x * y).map_err(wrap)?;
                    let dr = col_sum(&ga).map_err(wrap)?;
                    self.accumulate(r, dr);
                }
            }
            Op::DivRow(a, r) => {
                if self.requires[a.0] {
                    let da = row_zip(g, self.val(r), |x, y| x / y).map_err(wrap)?;
                    self.accumulate(a, da);
                }
                if self.requires[r.0] {
                    // d/dr (a / r) = -a / r^2 = -(a/r) / r
                    let quotient = self.values[i].as_ref().unwrap();
                    let gq = zip(g, quotient, |x, y| x * y).map_err(wrap)?;
                    let summed = col_sum(&gq).map_err(wrap)?;
                    let dr = row_div_neg(&summed, self.val(r)).map_err(wrap)?;
                    self.accumulate(r, dr);
                }
            }
            Op::ColMean(a) => {
                if !self.requires[a.0] {
                    return Ok(());
                }
                let m = self.shapes[a.0][0];
                let da = broadcast_rows(g, m, 1.0 / m as f64).map_err(wrap)?;
                self.accumulate(a, da);
            }
            Op::ColMax(a) => {
                if !self.requires[a.0] {
                    return Ok(());
                }
                let input = self.val(a);
                let (m, d) = (input.rows(), input.cols());
                let mut da = vec![0.0; m * d];
                for j in 0..d {
                    let mut best = 0usize;
                    for b in 1..m {
                        if input.at(b, j) > input.at(best, j) {
                            best = b;
                        }
                    }
                    da[best * d + j] = g.data()[j];
                }
                self.accumulate(a, Tensor::new(vec![m, d], da).map_err(wrap)?);
            }
            Op::Relu(a) => {
                if !self.requires[a.0] {
                    return Ok(());
                }
                let da = zip(g, self.val(a), |x, v| if v > 0.0 { x } else { 0.0 }).map_err(wrap)?;
                self.accumulate(a, da);
            }
            Op::Abs(a) => {
                if !self.requires[a.0] {
                    return Ok(());
                }
                let da = zip(g, self.val(a), |x, v| x * sign(v)).map_err(wrap)?;
                self.accumulate(a, da);
            }
            Op::Tanh(a) => {
                if !self.requires[a.0] {
                    return Ok(());
                }
                let y = self.values[i].as_ref().unwrap();
                let da = zip(g, y, |x, t| x * (1.0 - t * t)).map_err(wrap)?;
                self.accumulate(a, da);
            }
            Op::Sqrt(a) => {
                if !self.requires[a.0] {
                    return Ok(());
                }
                let y = self.values[i].as_ref().unwrap();
                let da = zip(g, y, |x, s| x / (2.0 * s)).map_err(wrap)?;
                self.accumulate(a, da);
            }
            Op::AddScalar(a, _) => {
                if self.requires[a.0] {
                    self.accumulate(a, g.clone());
                }
            }
            Op::MulScalar(a, c) => {
                if self.requires[a.0] {
                    let da = map(g, |x| x * c).map_err(wrap)?;
                    self.accumulate(a, da);
                }
            }
            Op::SumAll(a) => {
                if self.requires[a.0] {
                    let da = Tensor::full(&self.shapes[a.0], g.data()[0]).map_err(wrap)?;
                    self.accumulate(a, da);
                }
            }
            Op::SoftmaxCrossEntropy(l, t) => {
                if self.requires[l.0] || self.requires[t.0] {
                    let (dl, dt) = softmax_ce_backward(self.val(l), self.val(t), g.data()[0])
                        .map_err(wrap)?;
                    if self.requires[l.0] {
                        self.accumulate(l, dl);
                    }
                    if self.requires[t.0] {
                        self.accumulate(t, dt);
                    }
                }
            }
        }
        Ok(())
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

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn row_zip(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
    let (m, d) = (a.rows(), a.cols());
    let r = row.data();
    let mut data = Vec::with_capacity(m * d);
    for chunk in a.data().chunks_exact(d) {
        data.extend(chunk.iter().zip(r.iter()).map(|(&x, &y)| f(x, y)));
    }
    Tensor::new(vec![m, d], data)
}

fn col_mean(a: &Tensor) -> Result<Tensor, TensorError> {
    let (m, d) = (a.rows(), a.cols());
    let mut acc = col_fold(a, 0.0, |s, x| s + x);
    for v in &mut acc {
        *v /= m as f64;
    }
    Tensor::new(vec![1, d], acc)
}

fn col_sum(a: &Tensor) -> Result<Tensor, TensorError> {
    let d = a.cols();
    Tensor::new(vec![1, d], col_fold(a, 0.0, |s, x| s + x))
}

fn col_max(a: &Tensor) -> Result<Tensor, TensorError> {
    let d = a.cols();
    Tensor::new(vec![1, d], col_fold(a, f64::NEG_INFINITY, f64::max))
}

fn col_fold(a: &Tensor, init: f64, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let d = a.cols();
    let mut acc = vec![init; d];
    for chunk in a.data().chunks_exact(d) {
        for (s, &x) in acc.iter_mut().zip(chunk.iter()) {
            *s = f(*s, x);
        }
    }
    acc
}

fn broadcast_rows(row: &Tensor, m: usize, scale: f64) -> Result<Tensor, TensorError> {
    let d = row.cols();
    let mut data = Vec::with_capacity(m * d);
    for _ in 0..m {
        data.extend(row.data().iter().map(|&v| v * scale));
    }
    Tensor::new(vec![m, d], data)
}

/// `-summed / row^2` where both are `[1, d]`; helper for the DivRow backward.
fn row_div_neg(summed: &Tensor, row: &Tensor) -> Result<Tensor, TensorError> {
    zip(summed, row, |s, r| -s / r)
}

/// Row-major GEMM with optional logical transposes, backed by matrixmultiply.
pub(crate) fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor, TensorError> {
    let (am, ak) = (a.rows(), a.cols());
    let (bm, bk) = (b.rows(), b.cols());
    let (m, k1) = if ta { (ak, am) } else { (am, ak) };
    let (k2, n) = if tb { (bk, bm) } else { (bm, bk) };
    assert_eq!(k1, k2, "matmul inner dimension mismatch");
    let mut out = vec![0.0; m * n];
    // Physical layout is row-major [rows, cols]; a logical transpose swaps
    // the strides: element (i, j) of A^T lives at j * cols + i.
    let (rsa, csa) = if ta {
        (1isize, ak as isize)
    } else {
        (ak as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, bk as isize)
    } else {
        (bk as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k1,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

fn softmax_ce(logits: &Tensor, targets: &Tensor) -> Result<Tensor, TensorError> {
    let (m, c) = (logits.rows(), logits.cols());
    let mut total = 0.0;
    for i in 0..m {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        for j in 0..c {
            total += targets.data()[i * c + j] * (lse - row[j]);
        }
    }
    Tensor::new(vec![1], vec![total / m as f64])
}

fn softmax_ce_backward(
    logits: &Tensor,
    targets: &Tensor,
    g: f64,
) -> Result<(Tensor, Tensor), TensorError> {
    let (m, c) = (logits.rows(), logits.cols());
    let scale = g / m as f64;
    let mut dl = vec![0.0; m * c];
    let mut dt = vec![0.0; m * c];
    for i in 0..m {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let lse = max + denom.ln();
        let tsum: f64 = targets.data()[i * c..(i + 1) * c].iter().sum();
        for j in 0..c {
            let p = exps[j] / denom;
            dl[i * c + j] = scale * (tsum * p - targets.data()[i * c + j]);
            dt[i * c + j] = scale * (lse - row[j]);
        }
    }
    Ok((
        Tensor::new(vec![m, c], dl)?,
        Tensor::new(vec![m, c], dt)?,
    ))
}
