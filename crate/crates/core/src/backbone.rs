//! ConvNeXt feature extractor, HybridEmbed, and the shifted-window
//! transformer tower ending in a fixed-width feature head.

use std::sync::Arc;

use genconvit_tensor::{Float, Graph, Tensor, Var, GATHER_ZERO};

use crate::config::{ModelConfig, SwinStage};
use crate::error::{Error, Result};
use crate::generative::expect_shape;
use crate::nn::{Ctx, Initializer};

/// Attention logit added between tokens that must not see each other.
pub const MASK_VALUE: f64 = -100.0;

const NONE: usize = usize::MAX;

/// Token bookkeeping for one (grid, window, shift) triple: which token
/// fills each window slot, where each token lands, and the attention mask
/// separating regions that a cyclic shift or zero padding made adjacent.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    pub windows: usize,
    /// Per window slot (window-major), the source token or `NONE` for padding.
    slots: Vec<usize>,
    /// Per token, its window slot.
    home: Vec<usize>,
    /// Region label per window slot; `None` when no masking is needed.
    labels: Option<Vec<usize>>,
}

impl WindowPlan {
    pub fn new(h: usize, w: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::Config(format!("window {window} with shift {shift}")));
        }
        let (hp, wp) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
        let (nh, nw) = (hp / window, wp / window);
        let n = window * window;
        let mut slots = vec![NONE; nh * nw * n];
        let mut home = vec![NONE; h * w];
        let mut labels = vec![0; slots.len()];
        let region = |p: usize, len: usize| {
            if shift == 0 || p < len - window {
                0
            } else if p < len - shift {
                1
            } else {
                2
            }
        };
        const PAD: usize = 9;
        for py in 0..hp {
            for px in 0..wp {
                let slot = ((py / window) * nw + px / window) * n + (py % window) * window + px % window;
                let (oy, ox) = ((py + shift) % hp, (px + shift) % wp);
                if oy < h && ox < w {
                    slots[slot] = oy * w + ox;
                    home[oy * w + ox] = slot;
                    labels[slot] = region(py, hp) * 3 + region(px, wp);
                } else {
                    labels[slot] = PAD;
                }
            }
        }
        let needs_mask = shift > 0 || hp != h || wp != w;
        Ok(WindowPlan {
            h,
            w,
            window,
            shift,
            windows: nh * nw,
            slots,
            home,
            labels: needs_mask.then_some(labels),
        })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// `windows x 1 x n x n` additive mask, if any pair must be hidden.
    pub fn mask<F: Float>(&self) -> Option<Tensor<F>> {
        let labels = self.labels.as_ref()?;
        let n = self.tokens_per_window();
        let mut data = Vec::with_capacity(self.windows * n * n);
        for win in labels.chunks(n) {
            for &a in win {
                for &b in win {
                    data.push(if a == b { F::zero() } else { F::of(MASK_VALUE) });
                }
            }
        }
        Some(Tensor::from_vec(&[self.windows, 1, n, n], data).unwrap())
    }
}

fn expand(map: impl Iterator<Item = usize>, batch: usize, src_tokens: usize, dim: usize) -> Vec<usize> {
    let map: Vec<usize> = map.collect();
    let mut out = Vec::with_capacity(batch * map.len() * dim);
    for b in 0..batch {
        for &t in &map {
            for d in 0..dim {
                out.push(if t == NONE { GATHER_ZERO } else { (b * src_tokens + t) * dim + d });
            }
        }
    }
    out
}

/// `B x (h*w) x D -> (B*windows) x n x D` after a cyclic shift by
/// `-shift`, zero-filling padding slots.
pub fn window_partition<F: Float>(g: &mut Graph<F>, x: Var, plan: &WindowPlan) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != plan.h * plan.w {
        return Err(Error::Shape {
            what: "window_partition tokens",
            expected: vec![s.first().copied().unwrap_or(0), plan.h * plan.w, s.last().copied().unwrap_or(0)],
            got: s,
        });
    }
    let (b, d) = (s[0], s[2]);
    let index = expand(plan.slots.iter().copied(), b, plan.h * plan.w, d);
    let n = plan.tokens_per_window();
    Ok(g.gather(x, Arc::new(index), &[b * plan.windows, n, d])?)
}

/// Inverse of [`window_partition`]: undoes the shift and drops padding.
pub fn window_reverse<F: Float>(g: &mut Graph<F>, windows: Var, plan: &WindowPlan) -> Result<Var> {
    let s = g.shape(windows).to_vec();
    let n = plan.tokens_per_window();
    if s.len() != 3 || s[1] != n || s[0] % plan.windows != 0 {
        return Err(Error::Shape {
            what: "window_reverse windows",
            expected: vec![plan.windows, n, s.last().copied().unwrap_or(0)],
            got: s,
        });
    }
    let (b, d) = (s[0] / plan.windows, s[2]);
    let index = expand(plan.home.iter().copied(), b, plan.windows * n, d);
    Ok(g.gather(windows, Arc::new(index), &[b, plan.h * plan.w, d])?)
}

/// `(i, j) -> (dy + w - 1) * (2w - 1) + (dx + w - 1)` over window slots.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) + window - 1 - (j / window);
            let dx = (i % window) + window - 1 - (j % window);
            idx.push(dy * span + dx);
        }
    }
    idx
}

pub fn init_attention<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, dim: usize, heads: usize, window: usize) -> Result<()> {
    init.linear(&format!("{prefix}.qkv"), 3 * dim, dim, true)?;
    let span = 2 * window - 1;
    init.zeros(format!("{prefix}.rel_bias"), &[span * span, heads])?;
    init.linear(&format!("{prefix}.proj"), dim, dim, true)
}

/// Multi-head self-attention inside each window. Returns the projected
/// output and the attention probabilities `B' x heads x n x n`.
pub fn window_attention_probs<F: Float>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    prefix: &str,
    heads: usize,
    window: usize,
    mask: Option<Tensor<F>>,
) -> Result<(Var, Var)> {
    let s = ctx.g.shape(x).to_vec();
    let n = window * window;
    if s.len() != 3 || s[1] != n {
        return Err(Error::Shape {
            what: "window_attention input",
            expected: vec![s.first().copied().unwrap_or(0), n, s.last().copied().unwrap_or(0)],
            got: s,
        });
    }
    let (bw, dim) = (s[0], s[2]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
    }
    let hd = dim / heads;
    let qkv = ctx.linear(x, &format!("{prefix}.qkv"))?;
    let qkv = ctx.g.reshape(qkv, &[bw, n, 3, heads, hd])?;
    let qkv = ctx.g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let part = |i: usize, g: &mut Graph<F>| -> Result<Var> {
        let t = g.narrow(qkv, 0, i, 1)?;
        Ok(g.reshape(t, &[bw, heads, n, hd])?)
    };
    let q = part(0, ctx.g)?;
    let k = part(1, ctx.g)?;
    let v = part(2, ctx.g)?;
    let q = ctx.g.affine(q, 1.0 / (hd as f64).sqrt(), 0.0);
    let kt = ctx.g.transpose_last(k)?;
    let mut attn = ctx.g.matmul(q, kt)?;

    let table = ctx.p(&format!("{prefix}.rel_bias"))?;
    let span = 2 * window - 1;
    if ctx.g.shape(table) != [span * span, heads] {
        return Err(Error::Shape {
            what: "relative position table",
            expected: vec![span * span, heads],
            got: ctx.g.shape(table).to_vec(),
        });
    }
    let rel = relative_position_index(window);
    let index: Vec<usize> = (0..heads)
        .flat_map(|h| rel.iter().map(move |&r| r * heads + h))
        .collect();
    let bias = ctx.g.gather(table, Arc::new(index), &[heads, n, n])?;
    attn = ctx.g.add(attn, bias)?;

    if let Some(mask) = mask {
        let nw = mask.shape()[0];
        if bw % nw != 0 {
            return Err(Error::Shape {
                what: "attention mask",
                expected: vec![bw, 1, n, n],
                got: mask.shape().to_vec(),
            });
        }
        let a = ctx.g.reshape(attn, &[bw / nw, nw, heads, n, n])?;
        let m = ctx.g.constant(mask);
        let a = ctx.g.add(a, m)?;
        attn = ctx.g.reshape(a, &[bw, heads, n, n])?;
    }
    let probs = ctx.g.softmax(attn)?;
    let out = ctx.g.matmul(probs, v)?;
    let out = ctx.g.permute(out, &[0, 2, 1, 3])?;
    let out = ctx.g.reshape(out, &[bw, n, dim])?;
    let out = ctx.linear(out, &format!("{prefix}.proj"))?;
    Ok((out, probs))
}

pub fn window_attention<F: Float>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    prefix: &str,
    heads: usize,
    window: usize,
    mask: Option<Tensor<F>>,
) -> Result<Var> {
    Ok(window_attention_probs(ctx, x, prefix, heads, window, mask)?.0)
}

pub fn init_swin_block<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, st: &SwinStage) -> Result<()> {
    init.norm(&format!("{prefix}.norm1"), st.dim)?;
    init_attention(init, &format!("{prefix}.attn"), st.dim, st.heads, st.window)?;
    init.norm(&format!("{prefix}.norm2"), st.dim)?;
    init.linear(&format!("{prefix}.fc1"), 4 * st.dim, st.dim, true)?;
    init.linear(&format!("{prefix}.fc2"), st.dim, 4 * st.dim, true)
}

/// Pre-norm transformer block with (shifted) window attention and a GELU MLP.
pub fn swin_block<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str, st: &SwinStage, shift: usize) -> Result<Var> {
    let plan = WindowPlan::new(st.grid, st.grid, st.window, shift)?;
    let h = ctx.layer_norm(x, &format!("{prefix}.norm1"))?;
    let w = window_partition(ctx.g, h, &plan)?;
    let a = window_attention(ctx, w, &format!("{prefix}.attn"), st.heads, st.window, plan.mask())?;
    let a = window_reverse(ctx.g, a, &plan)?;
    let x = ctx.g.add(x, a)?;
    let h = ctx.layer_norm(x, &format!("{prefix}.norm2"))?;
    let h = ctx.linear(h, &format!("{prefix}.fc1"))?;
    let h = ctx.g.gelu(h);
    let h = ctx.linear(h, &format!("{prefix}.fc2"))?;
    Ok(ctx.g.add(x, h)?)
}

pub fn init_patch_merging<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, dim: usize) -> Result<()> {
    init.norm(&format!("{prefix}.norm"), 4 * dim)?;
    init.linear(&format!("{prefix}.reduction"), 2 * dim, 4 * dim, false)
}

/// `B x (g*g) x D -> B x (g/2 * g/2) x 2D`: concatenates each 2x2
/// neighbourhood, layer-normalizes, and projects 4D to 2D.
pub fn patch_merging<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, grid: usize, prefix: &str) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    if grid % 2 != 0 {
        return Err(Error::Config(format!("patch merging needs an even grid, got {grid}")));
    }
    if s.len() != 3 || s[1] != grid * grid {
        return Err(Error::Shape {
            what: "patch_merging tokens",
            expected: vec![s.first().copied().unwrap_or(0), grid * grid, s.last().copied().unwrap_or(0)],
            got: s,
        });
    }
    let (b, d, half) = (s[0], s[2], grid / 2);
    let mut index = Vec::with_capacity(b * grid * grid * d);
    for bi in 0..b {
        for y in 0..half {
            for x in 0..half {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let t = (2 * y + dy) * grid + 2 * x + dx;
                    index.extend((0..d).map(|k| (bi * grid * grid + t) * d + k));
                }
            }
        }
    }
    let merged = ctx.g.gather(x, Arc::new(index), &[b, half * half, 4 * d])?;
    let h = ctx.layer_norm(merged, &format!("{prefix}.norm"))?;
    ctx.linear(h, &format!("{prefix}.reduction"))
}

/// Layer norm, mean over tokens, linear to `head_out`.
pub fn swin_head<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str) -> Result<Var> {
    let h = ctx.layer_norm(x, &format!("{prefix}.norm"))?;
    let pooled = ctx.g.mean_axis(h, 1)?;
    ctx.linear(pooled, &format!("{prefix}.fc"))
}

pub fn init_convnext_block<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, dim: usize) -> Result<()> {
    init.kaiming(format!("{prefix}.dwconv.weight"), &[dim, 1, 7, 7], 49)?;
    init.zeros(format!("{prefix}.dwconv.bias"), &[dim])?;
    init.norm(&format!("{prefix}.norm"), dim)?;
    init.linear(&format!("{prefix}.pwconv1"), 4 * dim, dim, true)?;
    init.linear(&format!("{prefix}.pwconv2"), dim, 4 * dim, true)
}

/// Depthwise 7x7, channel layer norm, 4x pointwise expansion with GELU,
/// pointwise projection, residual.
pub fn convnext_block<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str) -> Result<Var> {
    let ch = ctx.g.shape(x)[1];
    let y = ctx.conv(x, &format!("{prefix}.dwconv"), 1, 3, ch)?;
    let y = ctx.g.permute(y, &[0, 2, 3, 1])?;
    let y = ctx.layer_norm(y, &format!("{prefix}.norm"))?;
    let y = ctx.linear(y, &format!("{prefix}.pwconv1"))?;
    let y = ctx.g.gelu(y);
    let y = ctx.linear(y, &format!("{prefix}.pwconv2"))?;
    let y = ctx.g.permute(y, &[0, 3, 1, 2])?;
    Ok(ctx.g.add(x, y)?)
}

pub fn init_convnext<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let b = &cfg.backbone;
    let w = &b.stage_widths;
    init.conv(&format!("{prefix}.stem.conv"), w[0], 3, b.stem_patch)?;
    init.norm(&format!("{prefix}.stem.norm"), w[0])?;
    for (s, &depth) in b.stage_depths.iter().enumerate() {
        if s > 0 {
            init.norm(&format!("{prefix}.down{s}.norm"), w[s - 1])?;
            init.conv(&format!("{prefix}.down{s}.conv"), w[s], w[s - 1], 2)?;
        }
        for i in 0..depth {
            init_convnext_block(init, &format!("{prefix}.stage{s}.{i}"), w[s])?;
        }
    }
    Ok(())
}

/// Patchify stem, then stages separated by norm + 2x2/2 downsampling.
pub fn convnext_forward<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str, cfg: &ModelConfig) -> Result<Var> {
    let b = &cfg.backbone;
    let size = cfg.image_size;
    expect_shape(ctx.g, x, "convnext input", &[0, 3, size, size])?;
    let mut h = ctx.conv(x, &format!("{prefix}.stem.conv"), b.stem_patch, 0, 1)?;
    h = ctx.channel_norm(h, &format!("{prefix}.stem.norm"))?;
    for (s, &depth) in b.stage_depths.iter().enumerate() {
        if s > 0 {
            h = ctx.channel_norm(h, &format!("{prefix}.down{s}.norm"))?;
            h = ctx.conv(h, &format!("{prefix}.down{s}.conv"), 2, 0, 1)?;
        }
        for i in 0..depth {
            h = convnext_block(ctx, h, &format!("{prefix}.stage{s}.{i}"))?;
        }
    }
    Ok(h)
}

/// 1x1 projection to the embedding width, then `B x (h*w) x E` tokens.
pub fn hybrid_embed<F: Float>(ctx: &mut Ctx<'_, F>, fmap: Var, prefix: &str) -> Result<Var> {
    let y = ctx.conv(fmap, &format!("{prefix}.proj"), 1, 0, 1)?;
    let s = ctx.g.shape(y).to_vec();
    let y = ctx.g.reshape(y, &[s[0], s[1], s[2] * s[3]])?;
    Ok(ctx.g.permute(y, &[0, 2, 1])?)
}

pub fn init_branch<F: Float>(init: &mut Initializer<'_, F>, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let b = &cfg.backbone;
    init_convnext(init, &format!("{prefix}.convnext"), cfg)?;
    init.conv(&format!("{prefix}.embed.proj"), b.embed_dim, *b.stage_widths.last().unwrap(), 1)?;
    let stages = cfg.swin_stages();
    for (s, st) in stages.iter().enumerate() {
        if s > 0 {
            init_patch_merging(init, &format!("{prefix}.swin{s}.merge"), st.dim / 2)?;
        }
        for i in 0..st.depth {
            init_swin_block(init, &format!("{prefix}.swin{s}.{i}"), st)?;
        }
    }
    let last = stages.last().unwrap().dim;
    init.norm(&format!("{prefix}.head.norm"), last)?;
    init.linear(&format!("{prefix}.head.fc"), b.head_out, last, true)
}

/// One hybrid tower: image `B x 3 x S x S` to a `B x head_out` feature.
pub fn branch_forward<F: Float>(ctx: &mut Ctx<'_, F>, x: Var, prefix: &str, cfg: &ModelConfig) -> Result<Var> {
    let fmap = convnext_forward(ctx, x, &format!("{prefix}.convnext"), cfg)?;
    let mut t = hybrid_embed(ctx, fmap, &format!("{prefix}.embed"))?;
    for (s, st) in cfg.swin_stages().iter().enumerate() {
        if s > 0 {
            t = patch_merging(ctx, t, st.grid * 2, &format!("{prefix}.swin{s}.merge"))?;
        }
        for i in 0..st.depth {
            t = swin_block(ctx, t, &format!("{prefix}.swin{s}.{i}"), st, st.shift(i))?;
        }
    }
    swin_head(ctx, t, &format!("{prefix}.head"))
}
