//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for gradient propagation. Handles to nodes are plain
//! [`Var`] indices.
//!
//! ```
//! use strm_core::autodiff::Graph;
//! use strm_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new([2], vec![1.0, -2.0]).unwrap(), true);
//! let y = g.mul(x, x).unwrap();
//! let loss = g.mean_all(y).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0]);
//! ```

mod conv;
mod gemm;
mod loss;
mod norm;
mod pointwise;
mod shape;

pub use conv::ConvGeom;
pub use loss::euclidean;
pub use norm::{BnOptions, RunningStats};
pub use pointwise::sigmoid;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Keep this non-leaf node's gradient after a backward pass.
    retain: bool,
    grad: Option<Tensor>,
}

pub(crate) enum Op {
    Leaf,
    Conv(conv::ConvOp),
    BatchNorm(norm::BnOp),
    Dense { x: Var, w: Var, b: Option<Var> },
    Unary { x: Var, kind: pointwise::Unary },
    Binary { a: Var, b: Var, kind: pointwise::Binary },
    Blend { z: Var, s: Var, x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Softmax { x: Var, axis: usize, log: bool },
    Mean { x: Var, map: Vec<usize>, count: usize },
    Reshape { x: Var },
    Permute { x: Var, source: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, index: usize },
    Broadcast { x: Var, source: Vec<usize> },
    Pick { x: Var, indices: Vec<usize> },
    Triplet(loss::TripletOp),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv(c) => c.inputs(),
            Op::BatchNorm(b) => vec![b.x, b.gamma, b.beta],
            Op::Dense { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Unary { x, .. }
            | Op::Dropout { x, .. }
            | Op::Softmax { x, .. }
            | Op::Mean { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Select { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Blend { z, s, x } => vec![*z, *s, *x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Triplet(t) => vec![t.x],
        }
    }
}

/// Gradient accumulator used during a backward sweep.
pub(crate) struct Grads<'a> {
    slots: &'a mut [Option<Vec<f64>>],
    wants: &'a [bool],
}

impl Grads<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    pub(crate) fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates into a slot in place, allocating zeros on first use.
    pub(crate) fn slot(&mut self, v: Var, len: usize) -> Option<&mut Vec<f64>> {
        if !self.wants[v.0] {
            return None;
        }
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// Recorded computation. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_trace: Option<u64>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn accumulate(acc: &mut Option<Tensor>, shape: Vec<usize>, g: &[f64]) {
    match acc {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *acc = Some(Tensor::from_parts(shape, g.to_vec())),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that fingerprints every branch decision taken by
    /// non-smooth ops (ReLU sign, clamp activity, triplet hard choices).
    /// Two evaluations with equal fingerprints ran the same smooth piece.
    pub fn with_kink_trace() -> Self {
        Self {
            nodes: Vec::new(),
            kink_trace: Some(FNV_OFFSET),
        }
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kink_trace
    }

    pub(crate) fn tracing(&self) -> bool {
        self.kink_trace.is_some()
    }

    pub(crate) fn record_kink(&mut self, bits: impl IntoIterator<Item = u64>) {
        if let Some(h) = &mut self.kink_trace {
            for b in bits {
                *h = (*h ^ b).wrapping_mul(FNV_PRIME);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients
    /// on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Also keep the gradient of intermediate node `v` during the next
    /// backward pass (leaves always keep theirs).
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Accumulated gradient of a leaf or retained node, present after a
    /// backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name, node });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
            grad: None,
        });
        Ok(Var(node))
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    ///
    /// Gradients accumulate across calls; use [`Graph::zero_grad`] to reset.
    /// Leaves that require a gradient but do not influence `loss` receive
    /// zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let wants: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if wants[loss.0] {
            slots[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            if self.nodes[i].retain {
                let shape = self.nodes[i].value.shape().to_vec();
                accumulate(&mut self.nodes[i].grad, shape, &g);
            }
            let mut grads = Grads {
                slots: &mut slots,
                wants: &wants,
            };
            self.backward_node(i, &g, &mut grads);
        }
        for (node, slot) in self.nodes.iter_mut().zip(slots) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = slot.unwrap_or_else(|| vec![0.0; node.value.numel()]);
            accumulate(&mut node.grad, node.value.shape().to_vec(), &g);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut Grads<'_>) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv(c) => c.backward(self, g, grads),
            Op::BatchNorm(b) => b.backward(self, g, grads),
            Op::Dense { x, w, b } => pointwise::dense_backward(self, *x, *w, *b, g, grads),
            Op::Unary { x, kind } => kind.backward(self.value(*x), out, g, *x, grads),
            Op::Binary { a, b, kind } => kind.backward(self, *a, *b, out, g, grads),
            Op::Blend { z, s, x } => pointwise::blend_backward(self, *z, *s, *x, g, grads),
            Op::Dropout { x, mask } => {
                grads.add(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect())
            }
            Op::Softmax { x, axis, log } => {
                pointwise::softmax_backward(out, *axis, *log, g, *x, grads)
            }
            Op::Mean { x, map, count } => {
                let n = *count as f64;
                if let Some(slot) = grads.slot(*x, map.len()) {
                    for (s, &o) in slot.iter_mut().zip(map) {
                        *s += g[o] / n;
                    }
                }
            }
            Op::Reshape { x } => grads.add(*x, g.to_vec()),
            Op::Permute { x, source } | Op::Broadcast { x, source } => {
                let len = self.value(*x).numel();
                if let Some(slot) = grads.slot(*x, len) {
                    for (&src, &gv) in source.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::Concat { inputs, axis } => shape::concat_backward(self, inputs, *axis, g, grads),
            Op::Select { x, axis, index } => {
                shape::select_backward(self.value(*x).shape(), *x, *axis, *index, g, grads)
            }
            Op::Pick { x, indices } => {
                let k = self.value(*x).shape()[1];
                if let Some(slot) = grads.slot(*x, indices.len() * k) {
                    for (row, (&c, &gv)) in indices.iter().zip(g).enumerate() {
                        slot[row * k + c] += gv;
                    }
                }
            }
            Op::Triplet(t) => t.backward(self, g, grads),
        }
    }
}
