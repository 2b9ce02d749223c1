//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! context to run its backward rule. Nodes are only ever appended, so the
//! node order is a topological order and backward is a single reverse sweep.

use super::ops::{attention, basic, conv, loss, resize};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-pass behaviour of layers with train/eval differences (batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct Node<T: Element> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    AddTiled { x: usize, bias: usize },
    Sum(usize),
    Relu(usize),
    Conv2d { x: usize, weight: usize, bias: Option<usize>, geom: conv::ConvGeom },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Resize { x: usize },
    Concat { a: usize, b: usize },
    ReflectPad { x: usize, pads: basic::Pads },
    Crop { x: usize, top: usize, left: usize },
    ToTokens(usize),
    FromTokens(usize),
    Linear { x: usize, weight: usize, bias: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<T> },
    BceWithLogits { logits: usize, targets: Vec<T> },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddTiled { x, bias } => vec![x, bias],
            Op::Sum(x) | Op::Relu(x) | Op::ToTokens(x) | Op::FromTokens(x) => vec![x],
            Op::Conv2d { x, weight, bias, .. } => {
                let mut v = vec![x, weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Resize { x } | Op::ReflectPad { x, .. } | Op::Crop { x, .. } => vec![x],
            Op::Concat { a, b } => vec![a, b],
            Op::Linear { x, weight, bias } => vec![x, weight, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }
}

/// Recorded computation over tensors of element type `T`.
pub struct Tape<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Sign of every ReLU input recorded so far. Two evaluations with equal
    /// patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let contributions = self.input_grads(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (idx, g) in contributions {
                let node = &mut self.nodes[idx];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::AddTiled { x, bias } => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.needs(*bias) {
                    out.push((*bias, basic::tiled_sum(g, self.val(*bias).numel())));
                }
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.val(*x).numel()])),
            Op::Relu(x) => {
                let y = node.value.data();
                out.push((*x, g.iter().zip(y).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect()));
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let grads = conv::conv2d_backward(
                    self.val(*x).data(),
                    self.val(*weight).data(),
                    g,
                    geom,
                    self.needs(*x),
                    self.needs(*weight),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        out.push((*b, conv::bias_grad(g, geom)));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let dims = self.val(*x).dims4()?;
                let grads = basic::batch_norm_backward(
                    g,
                    xhat,
                    inv_std,
                    self.val(*gamma).data(),
                    dims,
                    *batch_stats,
                );
                if self.needs(*x) {
                    out.push((*x, grads.dx));
                }
                out.push((*gamma, grads.dgamma));
                out.push((*beta, grads.dbeta));
            }
            Op::Resize { x } => {
                let [n, c, h, w] = self.val(*x).dims4()?;
                let [_, _, oh, ow] = node.value.dims4()?;
                out.push((*x, resize::bilinear_backward(g, n * c, h, w, oh, ow)));
            }
            Op::Concat { a, b } => {
                let da = self.val(*a).dims4()?;
                let db = self.val(*b).dims4()?;
                let (ga, gb) = basic::concat_channels_backward(g, da, db[1]);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::ReflectPad { x, pads } => {
                let dims = self.val(*x).dims4()?;
                out.push((*x, basic::reflect_pad_backward(g, dims, *pads)));
            }
            Op::Crop { x, top, left } => {
                let dims = self.val(*x).dims4()?;
                let [_, _, oh, ow] = node.value.dims4()?;
                out.push((*x, basic::crop_backward(g, dims, *top, *left, oh, ow)));
            }
            Op::ToTokens(x) => {
                let [n, c, h, w] = self.val(*x).dims4()?;
                out.push((*x, basic::transpose_last2(g, n, h * w, c)));
            }
            Op::FromTokens(x) => {
                let [n, c, h, w] = node.value.dims4()?;
                out.push((*x, basic::transpose_last2(g, n, c, h * w)));
            }
            Op::Linear { x, weight, bias } => {
                let grads = basic::linear_backward(
                    self.val(*x).data(),
                    self.val(*weight),
                    g,
                    self.needs(*x),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                out.push((*weight, grads.dw));
                out.push((*bias, grads.db));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let shape = self.val(*q).shape();
                let (n, t, c) = (shape[0], shape[1], shape[2]);
                let grads = attention::sdpa_backward(
                    self.val(*q).data(),
                    self.val(*k).data(),
                    self.val(*v).data(),
                    probs,
                    g,
                    n,
                    t,
                    c,
                    *heads,
                );
                out.push((*q, grads.dq));
                out.push((*k, grads.dk));
                out.push((*v, grads.dv));
            }
            Op::BceWithLogits { logits, targets } => {
                out.push((*logits, loss::bce_with_logits_backward(self.val(*logits).data(), targets, g[0])));
            }
        }
        Ok(out)
    }
}
