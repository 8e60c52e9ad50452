use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Node, Op, Var};
use crate::kernels::{gemm, Mat};
use crate::tensor::Tensor;

use super::{val, Grads};

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return None;
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared_rhs = lead_b.is_empty();
    if !shared_rhs && lead_a != lead_b {
        return None;
    }
    Some(MatMulDims {
        batch: lead_a.iter().product(),
        m,
        k,
        n,
        shared_rhs,
    })
}

impl<F: Float> Graph<F> {
    /// Batched matrix product over the two trailing axes. The right operand
    /// either has the same leading axes or is a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = matmul_dims(ta.shape(), tb.shape())
            .ok_or_else(|| TensorError::mismatch("matmul", ta.shape(), tb.shape()))?;
        let mut out = vec![F::zero(); d.batch * d.m * d.n];
        for i in 0..d.batch {
            let am = Mat::row_major(&ta.data()[i * d.m * d.k..(i + 1) * d.m * d.k], d.m, d.k);
            let boff = if d.shared_rhs { 0 } else { i * d.k * d.n };
            let bm = Mat::row_major(&tb.data()[boff..boff + d.k * d.n], d.k, d.n);
            gemm(F::one(), am, bm, F::zero(), &mut out[i * d.m * d.n..(i + 1) * d.m * d.n]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = d.n;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Affine map over the last axis: `x W^T + b` with `W` of shape
    /// `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.rank() == 0 || *tx.shape().last().unwrap() != tw.shape()[1] {
            return Err(TensorError::mismatch("linear", tx.shape(), tw.shape()));
        }
        let (dout, din) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.numel() / din.max(1);
        let mut out = vec![F::zero(); rows * dout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [dout] {
                return Err(TensorError::mismatch("linear bias", tb.shape(), &[dout]));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(tb.data());
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm(
            F::one(),
            Mat::row_major(tx.data(), rows, din),
            Mat::row_major(tw.data(), dout, din).t(),
            beta,
            &mut out,
        );
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }
}

pub(crate) fn backward<F: Float>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Result<Grads<F>> {
    let gd = g.data();
    Ok(match &nodes[i].op {
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let d = matmul_dims(ta.shape(), tb.shape()).expect("checked in forward");
            let mut ga = vec![F::zero(); ta.numel()];
            let mut gb = vec![F::zero(); tb.numel()];
            for i in 0..d.batch {
                let gm = Mat::row_major(&gd[i * d.m * d.n..(i + 1) * d.m * d.n], d.m, d.n);
                let am = Mat::row_major(&ta.data()[i * d.m * d.k..(i + 1) * d.m * d.k], d.m, d.k);
                let boff = if d.shared_rhs { 0 } else { i * d.k * d.n };
                let bm = Mat::row_major(&tb.data()[boff..boff + d.k * d.n], d.k, d.n);
                gemm(F::one(), gm, bm.t(), F::zero(), &mut ga[i * d.m * d.k..(i + 1) * d.m * d.k]);
                let beta = if d.shared_rhs && i > 0 { F::one() } else { F::zero() };
                gemm(F::one(), am.t(), gm, beta, &mut gb[boff..boff + d.k * d.n]);
            }
            vec![
                (*a, Tensor::from_vec(ta.shape(), ga)?),
                (*b, Tensor::from_vec(tb.shape(), gb)?),
            ]
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (val(nodes, *x), val(nodes, *w));
            let (dout, din) = (tw.shape()[0], tw.shape()[1]);
            let rows = tx.numel() / din.max(1);
            let gm = Mat::row_major(gd, rows, dout);
            let mut grads = Vec::with_capacity(3);
            if nodes[x.0].requires_grad {
                let mut gx = vec![F::zero(); tx.numel()];
                gemm(F::one(), gm, Mat::row_major(tw.data(), dout, din), F::zero(), &mut gx);
                grads.push((*x, Tensor::from_vec(tx.shape(), gx)?));
            }
            if nodes[w.0].requires_grad {
                let mut gw = vec![F::zero(); tw.numel()];
                gemm(F::one(), gm.t(), Mat::row_major(tx.data(), rows, din), F::zero(), &mut gw);
                grads.push((*w, Tensor::from_vec(tw.shape(), gw)?));
            }
            if let Some(b) = b {
                let mut gb = vec![F::zero(); dout];
                for row in gd.chunks(dout) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.push((*b, Tensor::from_vec(&[dout], gb)?));
            }
            grads
        }
        _ => unreachable!("not a linalg op"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0));
        let w = g.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn linear_rejects_mismatched_inner_dim() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        let w = g.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            g.linear(x, w, None),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn concatenated_features_to_two_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[4, 2000]));
        let w = g.constant(Tensor::full(&[2, 2000], 0.001));
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.shape(y), &[4, 2]);
        assert!((g.value(y).data()[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[3, 2, 4], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[4, 5], |i| (i % 3) as f64));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[3, 2, 5]);
        let (ta, tb) = (g.value(a), g.value(b));
        let naive: f64 = (0..4).map(|p| ta.at(&[2, 1, p]) * tb.at(&[p, 3])).sum();
        assert_eq!(g.value(c).at(&[2, 1, 3]), naive);
    }
}
