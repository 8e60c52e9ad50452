//! Differentiable operations. Each submodule adds forward methods to
//! [`Graph`](crate::Graph) and the matching reverse rule.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod resize;
pub mod shape;

use crate::error::Result;
use crate::float::Float;
use crate::graph::{Node, Op, Var};
use crate::tensor::Tensor;

pub(crate) type Grads<F> = Vec<(Var, Tensor<F>)>;

pub(crate) fn val<F: Float>(nodes: &[Node<F>], v: Var) -> &Tensor<F> {
    &nodes[v.0].value
}

/// Gradient contributions of node `i`'s inputs given its output gradient.
pub(crate) fn backward<F: Float>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Result<Grads<F>> {
    let op = &nodes[i].op;
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            elementwise::backward_binary(nodes, *a, *b, g, op)
        }
        Op::Scale(..) | Op::Exp(_) | Op::Act(..) | Op::Sum(_) | Op::Mean(_) | Op::MeanAxis { .. } => {
            elementwise::backward_unary(nodes, i, g)
        }
        Op::Reshape(_)
        | Op::Permute { .. }
        | Op::Concat { .. }
        | Op::Narrow { .. }
        | Op::Gather { .. } => shape::backward(nodes, i, g),
        Op::MatMul(..) | Op::Linear { .. } => linalg::backward(nodes, i, g),
        Op::Conv2d { .. } | Op::ConvTranspose2d { .. } | Op::MaxPool2d { .. } => {
            conv::backward(nodes, i, g)
        }
        Op::BatchNorm2d { .. } | Op::LayerNorm { .. } => norm::backward(nodes, i, g),
        Op::Softmax(_) | Op::CrossEntropy { .. } | Op::Mse(..) => loss::backward(nodes, i, g),
        Op::ResizeBilinear(_) => resize::backward(nodes, i, g),
    }
}
