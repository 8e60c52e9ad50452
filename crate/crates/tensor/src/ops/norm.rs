use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Node, Op, Var};
use crate::tensor::Tensor;

use super::{val, Grads};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean and (unbiased) variance of a batch norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Float> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }
}

fn check_affine<F: Float>(g: &Graph<F>, gamma: Var, beta: Var, ch: usize, op: &'static str) -> Result<()> {
    for v in [gamma, beta] {
        let s = g.value(v).shape();
        if s != [ch] {
            return Err(TensorError::mismatch(op, s, &[ch]));
        }
    }
    Ok(())
}

impl<F: Float> Graph<F> {
    /// Batch normalization over N, H, W of an NCHW tensor.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<F>,
        mode: NormMode,
    ) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("batch_norm2d", format!("expected NCHW, got {s:?}")));
        }
        let (batch, ch, len) = (s[0], s[1], s[2] * s[3]);
        check_affine(self, gamma, beta, ch, "batch_norm2d")?;
        if stats.mean.len() != ch || stats.var.len() != ch {
            return Err(TensorError::mismatch("batch_norm2d running stats", &[stats.mean.len()], &[ch]));
        }
        let count = batch * len;
        let train = mode == NormMode::Train;
        if train && count <= 1 {
            return Err(TensorError::DegenerateVariance(s));
        }
        let d = tx.data();
        let eps = F::of(NORM_EPS);
        let mut inv_std = vec![F::zero(); ch];
        let mut mean = vec![F::zero(); ch];
        for c in 0..ch {
            let (mu, var) = if train {
                let n = F::of(count as f64);
                let mut sum = F::zero();
                for b in 0..batch {
                    sum += d[(b * ch + c) * len..(b * ch + c + 1) * len].iter().copied().sum::<F>();
                }
                let mu = sum / n;
                let mut sq = F::zero();
                for b in 0..batch {
                    for &v in &d[(b * ch + c) * len..(b * ch + c + 1) * len] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                let var = sq / n;
                let m = F::of(BN_MOMENTUM);
                let unbiased = sq / F::of((count - 1) as f64);
                stats.mean[c] = (F::one() - m) * stats.mean[c] + m * mu;
                stats.var[c] = (F::one() - m) * stats.var[c] + m * unbiased;
                (mu, var)
            } else {
                (stats.mean[c], stats.var[c])
            };
            mean[c] = mu;
            inv_std[c] = F::one() / (var + eps).sqrt();
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); d.len()];
        let mut out = vec![F::zero(); d.len()];
        for b in 0..batch {
            for c in 0..ch {
                let range = (b * ch + c) * len..(b * ch + c + 1) * len;
                for i in range {
                    let h = (d[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gd[c] * h + bd[c];
                }
            }
        }
        let value = Tensor::from_vec(&s, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        let dim = *s.last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        check_affine(self, gamma, beta, dim, "layer_norm")?;
        let rows = tx.numel() / dim.max(1);
        let d = tx.data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let eps = F::of(NORM_EPS);
        let n = F::of(dim as f64);
        let mut xhat = vec![F::zero(); d.len()];
        let mut out = vec![F::zero(); d.len()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &d[r * dim..(r + 1) * dim];
            let mu = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..dim {
                let h = (row[j] - mu) * inv;
                xhat[r * dim + j] = h;
                out[r * dim + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::from_vec(&s, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }
}

pub(crate) fn backward<F: Float>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Result<Grads<F>> {
    let gd = g.data();
    let mut grads = Vec::with_capacity(3);
    match &nodes[i].op {
        Op::BatchNorm2d {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let s = val(nodes, *x).shape();
            let (batch, ch, len) = (s[0], s[1], s[2] * s[3]);
            let gam = val(nodes, *gamma).data();
            let mut dgamma = vec![F::zero(); ch];
            let mut dbeta = vec![F::zero(); ch];
            for b in 0..batch {
                for c in 0..ch {
                    for i in (b * ch + c) * len..(b * ch + c + 1) * len {
                        dgamma[c] += gd[i] * xhat[i];
                        dbeta[c] += gd[i];
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let n = F::of((batch * len) as f64);
                let mut dx = vec![F::zero(); gd.len()];
                for b in 0..batch {
                    for c in 0..ch {
                        for i in (b * ch + c) * len..(b * ch + c + 1) * len {
                            dx[i] = if *train {
                                gam[c] * inv_std[c] / n * (n * gd[i] - dbeta[c] - xhat[i] * dgamma[c])
                            } else {
                                gd[i] * gam[c] * inv_std[c]
                            };
                        }
                    }
                }
                grads.push((*x, Tensor::from_vec(s, dx)?));
            }
            grads.push((*gamma, Tensor::from_vec(&[ch], dgamma)?));
            grads.push((*beta, Tensor::from_vec(&[ch], dbeta)?));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let s = val(nodes, *x).shape();
            let dim = *s.last().unwrap();
            let rows = gd.len() / dim.max(1);
            let gam = val(nodes, *gamma).data();
            let mut dgamma = vec![F::zero(); dim];
            let mut dbeta = vec![F::zero(); dim];
            let mut dx = vec![F::zero(); gd.len()];
            let n = F::of(dim as f64);
            for r in 0..rows {
                let mut sum_d = F::zero();
                let mut sum_dx = F::zero();
                for j in 0..dim {
                    let k = r * dim + j;
                    dgamma[j] += gd[k] * xhat[k];
                    dbeta[j] += gd[k];
                    let dh = gd[k] * gam[j];
                    sum_d += dh;
                    sum_dx += dh * xhat[k];
                }
                for j in 0..dim {
                    let k = r * dim + j;
                    let dh = gd[k] * gam[j];
                    dx[k] = inv_std[r] / n * (n * dh - sum_d - xhat[k] * sum_dx);
                }
            }
            grads.push((*x, Tensor::from_vec(s, dx)?));
            grads.push((*gamma, Tensor::from_vec(&[dim], dgamma)?));
            grads.push((*beta, Tensor::from_vec(&[dim], dbeta)?));
        }
        _ => unreachable!("not a norm op"),
    }
    Ok(grads)
}
