use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Node, Op, Var};
use crate::tensor::Tensor;

use super::{val, Grads};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Float>(data: &[F], dim: usize) -> Vec<F> {
    let mut out = vec![F::zero(); data.len()];
    for (src, dst) in data.chunks(dim).zip(out.chunks_mut(dim)) {
        let max = src.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

impl<F: Float> Graph<F> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let dim = *t.shape().last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let value = Tensor::from_vec(t.shape(), softmax_rows(t.data(), dim))?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits`
    /// (`batch x classes`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::mismatch("cross_entropy", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let probs = softmax_rows(t.data(), classes);
        let mut loss = F::zero();
        for (row, &y) in t.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            loss += lse - row[y];
        }
        loss /= F::of(labels.len().max(1) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::mismatch("mse", ta.shape(), tb.shape()));
        }
        let sum: F = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = sum / F::of(ta.numel().max(1) as f64);
        Ok(self.push(Tensor::scalar(value), Op::Mse(a, b)))
    }
}

pub(crate) fn backward<F: Float>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Result<Grads<F>> {
    Ok(match &nodes[i].op {
        Op::Softmax(x) => {
            let y = &nodes[i].value;
            let dim = *y.shape().last().unwrap();
            let mut dx = vec![F::zero(); y.numel()];
            for ((yr, gr), dr) in y.data().chunks(dim).zip(g.data().chunks(dim)).zip(dx.chunks_mut(dim)) {
                let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![(*x, Tensor::from_vec(y.shape(), dx)?)]
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let s = val(nodes, *logits).shape();
            let classes = s[1];
            let scale = g.item() / F::of(labels.len().max(1) as f64);
            let mut dx = probs.clone();
            for (row, &y) in dx.chunks_mut(classes).zip(labels) {
                row[y] -= F::one();
                row.iter_mut().for_each(|v| *v *= scale);
            }
            vec![(*logits, Tensor::from_vec(s, dx)?)]
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let scale = F::of(2.0) * g.item() / F::of(ta.numel().max(1) as f64);
            let da = ta.zip_map(tb, |x, y| scale * (x - y))?;
            let db = da.map(|v| -v);
            vec![(*a, da), (*b, db)]
        }
        _ => unreachable!("not a loss op"),
    })
}
