//! One optimizer step for each network.

use genconvit_tensor::{AdamConfig, AdamState, Float, Graph, Tensor};

use crate::config::ModelConfig;
use crate::datapipe::Normalization;
use crate::error::{Error, Result};
use crate::genconvit::{loss_a, loss_b, network_a_forward, network_b_forward, recon_target};
use crate::nn::{Bound, Ctx, ParamStore};

pub fn optimizer<F: Float>(store: &ParamStore<F>, config: AdamConfig) -> AdamState<F> {
    AdamState::new(config, store.values().map(|v| v.shape()))
}

fn apply<F: Float>(
    store: &mut ParamStore<F>,
    opt: &mut AdamState<F>,
    bound: Bound<F>,
    mut grads: genconvit_tensor::Gradients<F>,
) -> Result<()> {
    let grads = bound.gradients(&mut grads);
    let refs: Vec<Option<&Tensor<F>>> = grads.iter().map(Option::as_ref).collect();
    opt.update(&mut store.values_mut(), &refs)?;
    store.stats_mut().extend(bound.stats);
    Ok(())
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(v))
    }
}

/// Cross-entropy step on network A; returns the pre-update loss.
pub fn step_a<F: Float>(
    store: &mut ParamStore<F>,
    opt: &mut AdamState<F>,
    cfg: &ModelConfig,
    images: Tensor<F>,
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let mut ctx = Ctx::train(&mut g, store);
    let x = ctx.g.constant(images);
    let out = network_a_forward(&mut ctx, x, cfg)?;
    let loss = loss_a(ctx.g, out.logits, labels)?;
    let bound = ctx.finish();
    let value = finite(g.value(loss).item().as_f64())?;
    let grads = g.backward(loss)?;
    apply(store, opt, bound, grads)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepB {
    pub loss: f64,
    pub ce: f64,
    pub mse: f64,
}

/// CE + reconstruction step on network B with the given noise draw.
pub fn step_b<F: Float>(
    store: &mut ParamStore<F>,
    opt: &mut AdamState<F>,
    cfg: &ModelConfig,
    norm: &Normalization,
    images: Tensor<F>,
    labels: &[usize],
    eps: Option<Tensor<F>>,
) -> Result<StepB> {
    let mut g = Graph::new();
    let mut ctx = Ctx::train(&mut g, store);
    let x = ctx.g.constant(images);
    let out = network_b_forward(&mut ctx, x, cfg, eps)?;
    let target = recon_target(ctx.g, x, cfg, norm)?;
    let l = loss_b(ctx.g, &out, labels, target, cfg)?;
    let bound = ctx.finish();
    let step = StepB {
        loss: finite(g.value(l.total).item().as_f64())?,
        ce: g.value(l.ce).item().as_f64(),
        mse: g.value(l.mse).item().as_f64(),
    };
    let grads = g.backward(l.total)?;
    apply(store, opt, bound, grads)?;
    Ok(step)
}
