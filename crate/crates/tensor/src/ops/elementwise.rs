use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Node, Op, Var};
use crate::kernels::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape};
use crate::tensor::Tensor;

use super::{val, Grads};

/// Pointwise non-linearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope; 0.01 is the customary default.
    LeakyRelu(f64),
    /// Tanh approximation.
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(0.01)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanh` is several times slower and
/// GELU sits on every MLP activation.
fn fast_tanh<F: Float>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

fn gelu<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + fast_tanh(inner))
}

fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = fast_tanh(inner);
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<F: Float> Graph<F> {
    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    /// Broadcasting `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Broadcasting `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            TensorError::mismatch(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                ta.shape(),
                tb.shape(),
            )
        })?;
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            let mut out = vec![F::zero(); out_shape.iter().product()];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            Tensor::from_vec(&out_shape, out)?
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
        };
        Ok(self.push(value, op))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (F::of(scale), F::of(shift));
        let value = self.value(x).map(|v| s * v + t);
        self.push(value, Op::Scale(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let slope = match kind {
            Activation::LeakyRelu(s) => F::of(s),
            _ => F::zero(),
        };
        let value = self.value(x).map(|v| match kind {
            Activation::Relu => v.max(F::zero()),
            Activation::LeakyRelu(_) => {
                if v > F::zero() {
                    v
                } else {
                    v * slope
                }
            }
            Activation::Gelu => gelu(v),
            Activation::Sigmoid => sigmoid(v),
        });
        self.push(value, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / F::of(t.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::invalid(
                "mean_axis",
                format!("axis {axis} for shape {:?}", t.shape()),
            ));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let dim = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let inv = F::one() / F::of(dim as f64);
        let d = t.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let src = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }))
    }
}

pub(crate) fn backward_binary<F: Float>(
    nodes: &[Node<F>],
    a: Var,
    b: Var,
    g: &Tensor<F>,
    op: &Op<F>,
) -> Result<Grads<F>> {
    let (ta, tb) = (val(nodes, a), val(nodes, b));
    let out = g.shape();
    let mut grads = Vec::with_capacity(2);
    match op {
        Op::Add(..) | Op::Sub(..) => {
            let ga = reduce_to_shape(g.data(), out, ta.shape());
            grads.push((a, Tensor::from_vec(ta.shape(), ga)?));
            let mut gb = reduce_to_shape(g.data(), out, tb.shape());
            if matches!(op, Op::Sub(..)) {
                gb.iter_mut().for_each(|v| *v = -*v);
            }
            grads.push((b, Tensor::from_vec(tb.shape(), gb)?));
        }
        Op::Mul(..) => {
            let sa = broadcast_strides(ta.shape(), out);
            let sb = broadcast_strides(tb.shape(), out);
            let mut ga = vec![F::zero(); ta.numel()];
            let mut gb = vec![F::zero(); tb.numel()];
            let (da, db, dg) = (ta.data(), tb.data(), g.data());
            for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                ga[ia] += dg[o] * db[ib];
                gb[ib] += dg[o] * da[ia];
            });
            grads.push((a, Tensor::from_vec(ta.shape(), ga)?));
            grads.push((b, Tensor::from_vec(tb.shape(), gb)?));
        }
        _ => unreachable!("not a binary op"),
    }
    Ok(grads)
}

pub(crate) fn backward_unary<F: Float>(
    nodes: &[Node<F>],
    i: usize,
    g: &Tensor<F>,
) -> Result<Grads<F>> {
    let out = &nodes[i].value;
    Ok(match &nodes[i].op {
        Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
        Op::Exp(x) => vec![(*x, g.zip_map(out, |gv, y| gv * y)?)],
        Op::Act(x, kind) => {
            let input = val(nodes, *x);
            let grad = match kind {
                Activation::Relu => g.zip_map(input, |gv, v| if v > F::zero() { gv } else { F::zero() })?,
                Activation::LeakyRelu(s) => {
                    let s = F::of(*s);
                    g.zip_map(input, |gv, v| if v > F::zero() { gv } else { gv * s })?
                }
                Activation::Gelu => g.zip_map(input, |gv, v| gv * gelu_grad(v))?,
                Activation::Sigmoid => g.zip_map(out, |gv, y| gv * y * (F::one() - y))?,
            };
            vec![(*x, grad)]
        }
        Op::Sum(x) => {
            let gv = g.item();
            vec![(*x, Tensor::full(val(nodes, *x).shape(), gv))]
        }
        Op::Mean(x) => {
            let t = val(nodes, *x);
            let gv = g.item() / F::of(t.numel().max(1) as f64);
            vec![(*x, Tensor::full(t.shape(), gv))]
        }
        Op::MeanAxis { x, axis } => {
            let shape = val(nodes, *x).shape();
            let outer: usize = shape[..*axis].iter().product();
            let dim = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let inv = F::one() / F::of(dim as f64);
            let gd = g.data();
            let mut grad = Vec::with_capacity(outer * dim * inner);
            for o in 0..outer {
                for _ in 0..dim {
                    grad.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                }
            }
            vec![(*x, Tensor::from_vec(shape, grad)?)]
        }
        _ => unreachable!("not a unary op"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_leaky_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = g.constant(Tensor::from_vec(&[1], vec![-10.0]).unwrap());
        let y = g.activation(x, Activation::leaky());
        assert!((g.value(y).data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![-1000.0, 1000.0]).unwrap());
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn broadcast_add_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4]));
        let b = g.constant(Tensor::ones(&[3, 1]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 4]);
        let bad = g.constant(Tensor::ones(&[2]));
        assert!(matches!(
            g.add(a, bad),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
