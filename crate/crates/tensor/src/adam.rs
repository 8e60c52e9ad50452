//! Adam with bias correction and coupled (L2) weight decay.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        AdamState { config, step: 0, m, v }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    /// Nothing is modified when any gradient is non-finite.
    pub fn update(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<&Tensor<F>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::invalid(
                "adam",
                format!(
                    "state tracks {} parameters, got {} params and {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(TensorError::mismatch("adam", p.shape(), self.m[i].shape()));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::mismatch("adam gradient", g.shape(), p.shape()));
                }
                if !g.is_finite() {
                    return Err(TensorError::NonFiniteGradient(i));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (wd, eps) = (F::of(c.weight_decay), F::of(c.eps));
        let step_size = F::of(c.lr / bc1);
        let inv_bc2_sqrt = F::of(1.0 / bc2.sqrt());
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments) {
            let Some(g) = g else { continue };
            let state = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((pj, &gj), (mj, vj)) in p.data_mut().iter_mut().zip(g.data()).zip(state) {
                let grad = gj + wd * *pj;
                *mj = b1 * *mj + (F::one() - b1) * grad;
                *vj = b2 * *vj + (F::one() - b2) * grad * grad;
                *pj -= step_size * *mj / (vj.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
