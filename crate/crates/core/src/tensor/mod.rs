//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record a [`GraphNode`] linking the output
//! to its parents; [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into the `grad` slot of every
//! reachable leaf. Tensors are never mutated once they are part of a graph;
//! parameter updates replace the leaf instead.

mod gemm;
pub mod nn;
mod ops;

pub(crate) use ops::sigmoid;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// The differentiable operations, each carrying whatever it needs from the
/// forward pass to compute its backward pass.
#[derive(Debug, Clone)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    PowScalar(f64),
    Exp,
    Log,
    Clamp { min: f64, max: f64 },
    Relu,
    Sigmoid,
    Softmax { outer: usize, len: usize, inner: usize },
    LogSoftmax { outer: usize, len: usize, inner: usize },
    Sum,
    Mean,
    SumPerSample,
    Reshape,
    GatherRows { indices: Vec<usize> },
    ConcatChannels { first: usize },
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { argmax: Vec<usize> },
    UpsampleNearest2d { factor: usize },
    GlobalAvgPool,
    Linear,
    GroupNorm { groups: usize, normalized: Vec<f64>, inv_std: Vec<f64> },
    Dropout { mask: Vec<f64> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::PowScalar(_) => "pow_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumPerSample => "sum_per_sample",
            Op::Reshape => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::UpsampleNearest2d { .. } => "upsample_nearest2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear => "linear",
            Op::GroupNorm { .. } => "group_norm",
            Op::Dropout { .. } => "dropout",
        }
    }
}

/// Record of the operation that produced a non-leaf tensor.
#[derive(Debug)]
pub struct GraphNode {
    pub op: Op,
    pub parents: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<GraphNode>,
}

/// Row-major N-dimensional array of `f64`. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.0.data.len() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            s.field("op", &node.op.name());
        }
        s.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<GraphNode>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        if numel(shape) != len {
            return Err(Error::dim(format!("shape {shape:?} needs {} values, got {len}", numel(shape))));
        }
        Ok(())
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: gradients accumulate into it on backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    /// Builds the output of a differentiable op. A graph node is recorded only
    /// when at least one parent tracks gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[&Tensor]) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| GraphNode { op, parents: parents.iter().map(|p| (*p).clone()).collect() });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn node(&self) -> Option<&GraphNode> {
        self.0.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// A new trainable leaf with the given values and this tensor's shape.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        Self::check_shape(&self.0.shape, data.len())?;
        Ok(Self::build(self.0.shape.clone(), data, self.0.requires_grad, None))
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from this single-element tensor, adding d(self)/d(leaf)
    /// into the grad of every gradient-tracking leaf reachable from it.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            let Some(node) = t.node() else {
                t.accumulate_grad(&g);
                continue;
            };
            let parent_grads = backward_op(&node.op, t, &node.parents, &g);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel(), "{} grad size", node.op.name());
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-tracking tensors: parents precede children.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients w.r.t. each parent, `None` where the parent does not need one.
fn backward_op(op: &Op, out: &Tensor, parents: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Conv2d { .. }
        | Op::MaxPool2d { .. }
        | Op::UpsampleNearest2d { .. }
        | Op::GlobalAvgPool
        | Op::Linear
        | Op::GroupNorm { .. }
        | Op::Dropout { .. }
        | Op::ConcatChannels { .. } => nn::backward(op, out, parents, g),
        _ => ops::backward(op, out, parents, g),
    }
}
