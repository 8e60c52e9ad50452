use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Node, Op, Var};
use crate::kernels::for_each_broadcast;
use crate::tensor::{numel, strides, Tensor};

use super::{val, Grads};

/// Marks an output slot of [`Graph::gather`] that reads as zero.
pub const GATHER_ZERO: usize = usize::MAX;

fn permuted_strides(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    perm.iter().map(|&p| st[p]).collect()
}

impl<F: Float> Graph<F> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.numel() {
            return Err(TensorError::mismatch("reshape", t.shape(), shape));
        }
        let value = Tensor::from_vec(shape, t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", t.rank()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let ps = permuted_strides(t.shape(), perm);
        let src = t.data();
        let mut out = vec![F::zero(); t.numel()];
        for_each_broadcast(&out_shape, &ps, &ps, |o, i, _| out[o] = src[i]);
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(TensorError::invalid("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?);
        if axis >= first.rank() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for {:?}", first.shape())));
        }
        let base = first.shape().to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `start..start+len` of one axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    /// `out[i] = x[index[i]]` over flat indices, with [`GATHER_ZERO`]
    /// producing zeros. Expresses padding, cropping and cyclic shifts.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != index.len() {
            return Err(TensorError::LengthMismatch {
                len: index.len(),
                shape: shape.to_vec(),
            });
        }
        let src = t.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(F::zero());
            } else if i < src.len() {
                out.push(src[i]);
            } else {
                return Err(TensorError::invalid(
                    "gather",
                    format!("index {i} out of range for {} elements", src.len()),
                ));
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::Gather { x, index }))
    }
}

pub(crate) fn backward<F: Float>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Result<Grads<F>> {
    Ok(match &nodes[i].op {
        Op::Reshape(x) => {
            let shape = val(nodes, *x).shape();
            vec![(*x, Tensor::from_vec(shape, g.data().to_vec())?)]
        }
        Op::Permute { x, perm } => {
            let shape = val(nodes, *x).shape();
            let ps = permuted_strides(shape, perm);
            let mut grad = vec![F::zero(); g.numel()];
            let gd = g.data();
            for_each_broadcast(g.shape(), &ps, &ps, |o, i, _| grad[i] = gd[o]);
            vec![(*x, Tensor::from_vec(shape, grad)?)]
        }
        Op::Concat { inputs, axis } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for &v in inputs {
                let len = val(nodes, v).shape()[*axis];
                grads.push((v, g.narrow(*axis, start, len)?));
                start += len;
            }
            grads
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(nodes, *x).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let dim = shape[*axis];
            let len = g.shape()[*axis];
            let mut grad = vec![F::zero(); numel(shape)];
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                grad[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, Tensor::from_vec(shape, grad)?)]
        }
        Op::Gather { x, index } => {
            let shape = val(nodes, *x).shape();
            let mut grad = vec![F::zero(); numel(shape)];
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != GATHER_ZERO {
                    grad[i] += gv;
                }
            }
            vec![(*x, Tensor::from_vec(shape, grad)?)]
        }
        _ => unreachable!("not a shape op"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let back = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn gather_pads_with_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap());
        let y = g
            .gather(x, Arc::new(vec![1, GATHER_ZERO, 0]), &[3])
            .unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 0.0, 5.0]);
    }
}
