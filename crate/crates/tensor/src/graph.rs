//! The gradient tape.
//!
//! A [`Graph`] records every operation in execution order. Values are held
//! behind `Arc` so parameters enter the tape without being copied.
//! [`Graph::backward`] consumes the tape and walks it once in reverse.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops;
use crate::ops::elementwise::Activation;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F: Float> {
    pub(crate) value: Arc<Tensor<F>>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

pub(crate) enum Op<F: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Mse(Var, Var),
    ResizeBilinear(Var),
}

impl<F: Float> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Mse(a, b) => vec![*a, *b],
            Scale(x, _) | Exp(x) | Act(x, _) | Sum(x) | Mean(x) | Reshape(x) | Softmax(x)
            | ResizeBilinear(x) => vec![*x],
            MeanAxis { x, .. }
            | Permute { x, .. }
            | Narrow { x, .. }
            | Gather { x, .. }
            | MaxPool2d { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            Linear { x, w, b }
            | Conv2d { x, w, b, .. }
            | ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNorm2d { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Recorded forward computation.
pub struct Graph<F: Float> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Shares storage with the caller.
    pub fn param(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.leaf(value, true)
    }

    /// Detached leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.leaf(value, false)
    }

    /// New detached leaf holding the same value as `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<F>> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape.
    ///
    /// Leaves that cannot reach the loss get no entry in the returned
    /// [`Gradients`], which callers treat as a zero gradient.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<F>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        }
        let released = Arc::new(Tensor::zeros(&[0]));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let contributions = ops::backward(&self.nodes, i, &g)?;
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(t.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            // Every consumer of node i has a larger index and is done.
            self.nodes[i].value = released.clone();
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the trainable leaves after [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// `None` marks a leaf the loss does not depend on (zero gradient).
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
