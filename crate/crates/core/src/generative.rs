//! The autoencoder and variational autoencoder branches.

use genconvit_tensor::{Activation, Float, Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Initializer};

pub(crate) fn expect_shape<F: Float>(g: &Graph<F>, v: Var, what: &'static str, expected: &[usize]) -> Result<()> {
    let got = g.shape(v);
    if got.len() != expected.len() || got[1..] != expected[1..] || got[0] == 0 {
        let mut e = expected.to_vec();
        e[0] = got.first().copied().unwrap_or(0);
        return Err(Error::Shape {
            what,
            expected: e,
            got: got.to_vec(),
        });
    }
    Ok(())
}

pub fn init_ae<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let w = &cfg.ae.widths;
    let mut c = 3;
    for (i, &out) in w.iter().enumerate() {
        init.conv(&format!("{prefix}.enc.{i}"), out, c, 3)?;
        c = out;
    }
    for i in 0..w.len() {
        let out = if i + 1 == w.len() { 3 } else { w[w.len() - 2 - i] };
        init.conv_t(&format!("{prefix}.dec.{i}"), c, out, 2)?;
        c = out;
    }
    Ok(())
}

/// `B x 3 x S x S -> B x C x S/2^n x S/2^n`: conv 3x3 (stride 1), ReLU,
/// max-pool 2x2/2 per stage.
pub fn ae_encode<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str, cfg: &ModelConfig) -> Result<Var> {
    let s = cfg.image_size;
    expect_shape(ctx.g, x, "ae_encode input", &[0, 3, s, s])?;
    let mut h = x;
    for i in 0..cfg.ae.widths.len() {
        h = ctx.conv(h, &format!("{prefix}.enc.{i}"), 1, 1, 1)?;
        h = ctx.g.relu(h);
        h = ctx.g.maxpool2d(h, 2, 2)?;
    }
    Ok(h)
}

/// Transposed conv 2x2/2 per stage, ReLU between stages, sigmoid output.
pub fn ae_decode<F: Float>(ctx: &mut Ctx<'_, F>, z: Var, prefix: &str, cfg: &ModelConfig) -> Result<Var> {
    let n = cfg.ae.widths.len();
    let l = cfg.ae_latent_shape();
    expect_shape(ctx.g, z, "ae_decode latent", &[0, l[0], l[1], l[2]])?;
    let mut h = z;
    for i in 0..n {
        h = ctx.conv_t(h, &format!("{prefix}.dec.{i}"), 2)?;
        h = if i + 1 == n { ctx.g.sigmoid(h) } else { ctx.g.relu(h) };
    }
    Ok(h)
}

pub fn init_vae<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let mut c = 3;
    for (i, &out) in cfg.vae.enc_widths.iter().enumerate() {
        init.conv(&format!("{prefix}.enc.{i}.conv"), out, c, 3)?;
        init.batch_norm(&format!("{prefix}.enc.{i}.bn"), out)?;
        c = out;
    }
    let (flat, latent) = (cfg.vae_enc_flat(), cfg.latent_dim());
    init.linear(&format!("{prefix}.mu"), latent, flat, true)?;
    init.linear(&format!("{prefix}.logvar"), latent, flat, true)?;
    init.linear(&format!("{prefix}.fc"), latent, latent, true)?;
    let dec = &cfg.vae.dec_widths;
    for i in 0..dec.len() {
        let out = dec.get(i + 1).copied().unwrap_or(3);
        init.conv_t(&format!("{prefix}.dec.{i}"), dec[i], out, 2)?;
    }
    Ok(())
}

/// `B x 3 x S x S -> (mu, logvar)`, each `B x latent_dim`: conv 3x3/2, batch
/// norm, LeakyReLU per stage, then two linear heads on the flattened map.
pub fn vae_encode<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let s = cfg.image_size;
    expect_shape(ctx.g, x, "vae_encode input", &[0, 3, s, s])?;
    let batch = ctx.g.shape(x)[0];
    let mut h = x;
    for i in 0..cfg.vae.enc_widths.len() {
        h = ctx.conv(h, &format!("{prefix}.enc.{i}.conv"), 2, 1, 1)?;
        h = ctx.batch_norm(h, &format!("{prefix}.enc.{i}.bn"))?;
        h = ctx.act(h, Activation::leaky());
    }
    let flat = ctx.g.reshape(h, &[batch, cfg.vae_enc_flat()])?;
    let mu = ctx.linear(flat, &format!("{prefix}.mu"))?;
    let logvar = ctx.linear(flat, &format!("{prefix}.logvar"))?;
    Ok((mu, logvar))
}

/// `z = mu + exp(logvar / 2) * eps`; `None` means `eps = 0`, i.e. `z = mu`.
pub fn reparameterize<F: Float>(g: &mut Graph<F>, mu: Var, logvar: Var, eps: Option<Tensor<F>>) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::Shape {
            what: "reparameterize logvar",
            expected: g.shape(mu).to_vec(),
            got: g.shape(logvar).to_vec(),
        });
    }
    let Some(eps) = eps else { return Ok(mu) };
    let half = g.affine(logvar, 0.5, 0.0);
    let std = g.exp(half);
    let e = g.constant(eps);
    let noise = g.mul(std, e)?;
    Ok(g.add(mu, noise)?)
}

/// `B x latent_dim -> B x 3 x S/2 x S/2`: linear, reinterpretation as
/// `C x g x g`, transposed conv 2x2/2 stages with LeakyReLU between them and
/// a sigmoid output.
pub fn vae_decode<F: Float>(ctx: &mut Ctx<'_, F>, z: Var, prefix: &str, cfg: &ModelConfig) -> Result<Var> {
    expect_shape(ctx.g, z, "vae_decode latent", &[0, cfg.latent_dim()])?;
    let batch = ctx.g.shape(z)[0];
    let [c, h, w] = cfg.vae_latent_shape();
    let y = ctx.linear(z, &format!("{prefix}.fc"))?;
    let mut y = ctx.g.reshape(y, &[batch, c, h, w])?;
    let n = cfg.vae.dec_widths.len();
    for i in 0..n {
        y = ctx.conv_t(y, &format!("{prefix}.dec.{i}"), 2)?;
        y = if i + 1 == n {
            ctx.g.sigmoid(y)
        } else {
            ctx.act(y, Activation::leaky())
        };
    }
    Ok(y)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`, summed over latent units and
/// averaged over the batch.
pub fn kl_divergence<F: Float>(g: &mut Graph<F>, mu: Var, logvar: Var) -> Result<Var> {
    let batch = g.shape(mu)[0].max(1) as f64;
    let var = g.exp(logvar);
    let mu2 = g.mul(mu, mu)?;
    let a = g.affine(logvar, 1.0, 1.0);
    let b = g.sub(a, mu2)?;
    let c = g.sub(b, var)?;
    let s = g.sum(c);
    Ok(g.affine(s, -0.5 / batch, 0.0))
}
