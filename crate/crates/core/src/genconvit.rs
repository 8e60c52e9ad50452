//! Networks A and B, their losses, and frame-ensemble video prediction.

use genconvit_tensor::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{branch_forward, init_branch};
use crate::config::ModelConfig;
use crate::datapipe::Normalization;
use crate::error::{Error, Result};
use crate::generative::{
    ae_decode, ae_encode, init_ae, init_vae, kl_divergence, reparameterize, vae_decode, vae_encode,
};
use crate::nn::{Ctx, Initializer, ParamStore};

/// Learnable state of both networks. Names are canonical across the pair:
/// network A under `a.`, network B under `b.`.
#[derive(Clone, Debug)]
pub struct GenConViTParams<F: Float> {
    pub a: ParamStore<F>,
    pub b: ParamStore<F>,
}

impl<F: Float> GenConViTParams<F> {
    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn network(&self, net: Network) -> &ParamStore<F> {
        match net {
            Network::A => &self.a,
            Network::B => &self.b,
        }
    }

    pub fn network_mut(&mut self, net: Network) -> &mut ParamStore<F> {
        match net {
            Network::A => &mut self.a,
            Network::B => &mut self.b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Network {
    A,
    B,
}

impl Network {
    pub const ALL: [Network; 2] = [Network::A, Network::B];

    /// Leading component of every parameter name in the network.
    pub fn prefix(self) -> &'static str {
        match self {
            Network::A => "a",
            Network::B => "b",
        }
    }
}

fn register<F: Float>(init: &mut Initializer<'_, F>, net: Network, cfg: &ModelConfig) -> Result<()> {
    let p = net.prefix();
    match net {
        Network::A => init_ae(init, &format!("{p}.ae"), cfg)?,
        Network::B => init_vae(init, &format!("{p}.vae"), cfg)?,
    }
    init_branch(init, &format!("{p}.img"), cfg)?;
    init_branch(init, &format!("{p}.lat"), cfg)?;
    init.linear(&format!("{p}.head"), 2, cfg.head_in(), true)
}

pub fn init_network_a<F: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    register(&mut Initializer::new(&mut store, seed), Network::A, cfg)?;
    Ok(store)
}

pub fn init_network_b<F: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    register(&mut Initializer::new(&mut store, seed ^ 0x9e37_79b9_7f4a_7c15), Network::B, cfg)?;
    Ok(store)
}

/// Parameter names and shapes, in registration order, plus the batch-norm
/// layers and their channel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub params: Vec<(String, Vec<usize>)>,
    pub stats: Vec<(String, usize)>,
}

pub fn network_layout(cfg: &ModelConfig, net: Network) -> Result<Layout> {
    cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    register(&mut Initializer::dry(&mut store), net, cfg)?;
    Ok(Layout {
        params: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, v)| (n.clone(), v.shape().to_vec()))
            .collect(),
        stats: store.stats().iter().map(|(n, s)| (n.clone(), s.mean.len())).collect(),
    })
}

pub fn init_params<F: Float>(cfg: &ModelConfig, seed: u64) -> Result<GenConViTParams<F>> {
    Ok(GenConViTParams {
        a: init_network_a(cfg, seed)?,
        b: init_network_b(cfg, seed)?,
    })
}

fn fuse<F: Float>(ctx: &mut Ctx<'_, F>, img: Var, lat: Var, head: &str) -> Result<Var> {
    let both = ctx.g.concat(&[img, lat], 1)?;
    ctx.linear(both, head)
}

pub struct OutputA {
    pub logits: Var,
    /// `I_A`, the autoencoder reconstruction.
    pub recon: Var,
}

/// Image and `I_A = decode(encode(image))` through separate towers, fused
/// by a linear head over the concatenated features.
pub fn network_a_forward<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, cfg: &ModelConfig) -> Result<OutputA> {
    let z = ae_encode(ctx, x, "a.ae", cfg)?;
    let recon = ae_decode(ctx, z, "a.ae", cfg)?;
    let fi = branch_forward(ctx, x, "a.img", cfg)?;
    let fl = branch_forward(ctx, recon, "a.lat", cfg)?;
    let logits = fuse(ctx, fi, fl, "a.head")?;
    Ok(OutputA { logits, recon })
}

pub struct OutputB {
    pub logits: Var,
    /// `I_B` at half the input resolution.
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// As network A with the VAE; `I_B` is upsampled to the input size before
/// its tower. `eps = None` decodes the mean.
pub fn network_b_forward<F: Float>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    cfg: &ModelConfig,
    eps: Option<Tensor<F>>,
) -> Result<OutputB> {
    let (mu, logvar) = vae_encode(ctx, x, "b.vae", cfg)?;
    let z = reparameterize(ctx.g, mu, logvar, eps)?;
    let recon = vae_decode(ctx, z, "b.vae", cfg)?;
    let up = ctx.g.resize_bilinear(recon, cfg.image_size, cfg.image_size)?;
    let fi = branch_forward(ctx, x, "b.img", cfg)?;
    let fl = branch_forward(ctx, up, "b.lat", cfg)?;
    let logits = fuse(ctx, fi, fl, "b.head")?;
    Ok(OutputB {
        logits,
        recon,
        mu,
        logvar,
    })
}

pub fn loss_a<F: Float>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, labels)?)
}

/// Reconstruction target for network B: the normalized input mapped back
/// to `[0, 1]` and resized to the reconstruction size.
pub fn recon_target<F: Float>(g: &mut Graph<F>, x: Var, cfg: &ModelConfig, norm: &Normalization) -> Result<Var> {
    let x = g.detach(x);
    let std = g.constant(Tensor::from_f64(&[1, 3, 1, 1], &norm.std)?);
    let mean = g.constant(Tensor::from_f64(&[1, 3, 1, 1], &norm.mean)?);
    let scaled = g.mul(x, std)?;
    let raw = g.add(scaled, mean)?;
    let r = cfg.recon_size();
    Ok(g.resize_bilinear(raw, r, r)?)
}

pub struct LossB {
    pub total: Var,
    pub ce: Var,
    pub mse: Var,
}

/// `CE + recon_weight * MSE(I_B, target) + kl_weight * KL`.
pub fn loss_b<F: Float>(
    g: &mut Graph<F>,
    out: &OutputB,
    labels: &[usize],
    target: Var,
    cfg: &ModelConfig,
) -> Result<LossB> {
    let ce = g.cross_entropy(out.logits, labels)?;
    if g.shape(out.recon) != g.shape(target) {
        return Err(Error::Shape {
            what: "reconstruction target",
            expected: g.shape(out.recon).to_vec(),
            got: g.shape(target).to_vec(),
        });
    }
    let mse = g.mse(out.recon, target)?;
    let weighted = g.affine(mse, cfg.recon_weight, 0.0);
    let mut total = g.add(ce, weighted)?;
    if cfg.kl_weight != 0.0 {
        let kl = kl_divergence(g, out.mu, out.logvar)?;
        let kl = g.affine(kl, cfg.kl_weight, 0.0);
        total = g.add(total, kl)?;
    }
    Ok(LossB { total, ce, mse })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Real,
    Fake,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Real => "REAL",
            Verdict::Fake => "FAKE",
        })
    }
}

/// Score at or above which a video is called fake.
pub const FAKE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// Fake-class probability per frame, in input order.
    pub per_frame_a: Vec<f64>,
    pub per_frame_b: Vec<f64>,
    pub video_score: f64,
    pub verdict: Verdict,
    pub frames_used: usize,
}

impl PredictionResult {
    /// Averages every per-frame probability of both networks. Summation
    /// runs in sorted order so the score does not depend on frame order.
    pub fn from_probs(per_frame_a: Vec<f64>, per_frame_b: Vec<f64>) -> Result<Self> {
        if per_frame_a.is_empty() || per_frame_a.len() != per_frame_b.len() {
            return Err(Error::NoFrames);
        }
        let mut all: Vec<f64> = per_frame_a.iter().chain(&per_frame_b).copied().collect();
        all.sort_by(f64::total_cmp);
        let video_score = all.iter().sum::<f64>() / all.len() as f64;
        Ok(PredictionResult {
            frames_used: per_frame_a.len(),
            verdict: if video_score >= FAKE_THRESHOLD {
                Verdict::Fake
            } else {
                Verdict::Real
            },
            video_score,
            per_frame_a,
            per_frame_b,
        })
    }
}

/// Fake-class probability of each row of `logits`.
pub fn fake_probs<F: Float>(g: &mut Graph<F>, logits: Var) -> Result<Vec<f64>> {
    let p = g.softmax(logits)?;
    Ok(g.value(p).data().chunks(2).map(|r| r[1].as_f64()).collect())
}

/// Per-frame fake probabilities of both networks for a `B x 3 x S x S`
/// batch, in eval mode with `eps = 0`.
pub fn frame_probs<F: Float>(params: &GenConViTParams<F>, cfg: &ModelConfig, batch: &Tensor<F>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let mut ctx = Ctx::eval(&mut g, &params.a);
    let x = ctx.g.constant(batch.clone());
    let out = network_a_forward(&mut ctx, x, cfg)?;
    let pa = fake_probs(ctx.g, out.logits)?;
    let mut g = Graph::new();
    let mut ctx = Ctx::eval(&mut g, &params.b);
    let x = ctx.g.constant(batch.clone());
    let out = network_b_forward(&mut ctx, x, cfg, None)?;
    let pb = fake_probs(ctx.g, out.logits)?;
    Ok((pa, pb))
}

/// Runs every frame (each `3 x S x S`, already normalized) through both
/// networks, `chunk` frames per forward pass, and averages.
pub fn predict_video<F: Float>(
    params: &GenConViTParams<F>,
    cfg: &ModelConfig,
    frames: &[Tensor<F>],
    chunk: usize,
) -> Result<PredictionResult> {
    if frames.is_empty() {
        return Err(Error::NoFrames);
    }
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    for group in frames.chunks(chunk.max(1)) {
        let batch = Tensor::stack(group)?;
        let (a, b) = frame_probs(params, cfg, &batch)?;
        pa.extend(a);
        pb.extend(b);
    }
    PredictionResult::from_probs(pa, pb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_initialized_store() {
        let cfg = ModelConfig::micro();
        let p = init_params::<f64>(&cfg, 3).unwrap();
        for net in Network::ALL {
            let layout = network_layout(&cfg, net).unwrap();
            let store = p.network(net);
            let shapes: Vec<(String, Vec<usize>)> =
                store.names().iter().cloned().zip(store.values().map(|v| v.shape().to_vec())).collect();
            assert_eq!(layout.params, shapes);
            let stats: Vec<(String, usize)> = store.stats().iter().map(|(n, s)| (n.clone(), s.mean.len())).collect();
            assert_eq!(layout.stats, stats);
        }
        assert!(network_layout(&cfg, Network::B).unwrap().stats.len() > 0);
    }

    #[test]
    fn score_is_global_mean_and_ties_are_fake() {
        let r = PredictionResult::from_probs(vec![0.9; 4], vec![0.9; 4]).unwrap();
        assert!((r.video_score - 0.9).abs() < 1e-15);
        assert_eq!(r.verdict, Verdict::Fake);
        let r = PredictionResult::from_probs(vec![1.0; 3], vec![0.0; 3]).unwrap();
        assert_eq!(r.video_score, 0.5);
        assert_eq!(r.verdict, Verdict::Fake);
        let r = PredictionResult::from_probs(vec![0.2], vec![0.4]).unwrap();
        assert_eq!(r.verdict, Verdict::Real);
        assert_eq!(r.frames_used, 1);
        assert!(matches!(PredictionResult::from_probs(vec![], vec![]), Err(Error::NoFrames)));
    }

    #[test]
    fn softmax_shift_leaves_probability_unchanged() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[1, 2], vec![0.3, 1.7]).unwrap());
        let b = g.constant(Tensor::from_vec(&[1, 2], vec![5.3, 6.7]).unwrap());
        let (pa, pb) = (fake_probs(&mut g, a).unwrap(), fake_probs(&mut g, b).unwrap());
        assert!((pa[0] - pb[0]).abs() < 1e-15);
    }

    #[test]
    fn loss_b_hand_computed() {
        // logits [0, 0] -> CE = ln 2; recon [0.2, 0.6] vs target [0, 1] ->
        // MSE = (0.04 + 0.16) / 2 = 0.1.
        let cfg = ModelConfig::micro();
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 2]));
        let recon = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.2, 0.6]).unwrap());
        let target = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let mu = g.constant(Tensor::zeros(&[1, 1]));
        let out = OutputB {
            logits,
            recon,
            mu,
            logvar: mu,
        };
        let l = loss_b(&mut g, &out, &[1], target, &cfg).unwrap();
        assert!((g.value(l.total).item() - (std::f64::consts::LN_2 + 0.1)).abs() < 1e-12);
        let same = loss_b(&mut g, &out, &[1], recon, &cfg).unwrap();
        assert!((g.value(same.total).item() - g.value(same.ce).item()).abs() < 1e-15);
    }
}
