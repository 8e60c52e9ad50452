//! Architecture hyperparameters and the derived tensor geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full widths at 224x224 input.
    Tiny,
    /// Reduced widths at 64x64 input.
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "toy" => Ok(Preset::Toy),
            other => Err(format!("unknown preset `{other}` (expected tiny or toy)")),
        }
    }
}

/// Autoencoder: encoder stage widths; the decoder mirrors them back to 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Output width of each stride-2 encoder stage.
    pub enc_widths: Vec<usize>,
    /// Input width of each transposed-conv decoder stage; the last outputs 3.
    pub dec_widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_patch: usize,
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub embed_dim: usize,
    pub window: usize,
    /// Transformer blocks per Swin stage; stages after the first start with
    /// patch merging.
    pub swin_depths: Vec<usize>,
    pub swin_heads: Vec<usize>,
    pub head_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub ae: AeConfig,
    pub vae: VaeConfig,
    pub backbone: BackboneConfig,
    /// Weight of the reconstruction MSE in network B's loss.
    pub recon_weight: f64,
    /// Weight of the KL term in network B's loss.
    pub kl_weight: f64,
}

/// Geometry of one Swin stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwinStage {
    pub grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Window side after clamping to the grid.
    pub window: usize,
}

impl SwinStage {
    /// Cyclic shift of block `i`: alternates 0 and window/2, and is always 0
    /// when a single window covers the grid.
    pub fn shift(&self, block: usize) -> usize {
        if block % 2 == 1 && self.grid > self.window {
            self.window / 2
        } else {
            0
        }
    }
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Tiny => Self::tiny(),
            Preset::Toy => Self::toy(),
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 224,
            ae: AeConfig {
                widths: vec![16, 32, 64, 128, 256],
            },
            vae: VaeConfig {
                enc_widths: vec![16, 32, 64, 128],
                dec_widths: vec![256, 64, 32, 16],
            },
            backbone: BackboneConfig {
                stem_patch: 4,
                stage_depths: vec![3, 3, 9, 3],
                stage_widths: vec![96, 192, 384, 768],
                embed_dim: 768,
                window: 7,
                swin_depths: vec![4],
                swin_heads: vec![24],
                head_out: 1000,
            },
            recon_weight: 1.0,
            kl_weight: 0.0,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            ae: AeConfig {
                widths: vec![8, 16, 32, 32, 64],
            },
            vae: VaeConfig {
                enc_widths: vec![8, 16, 32, 64],
                dec_widths: vec![64, 32, 16, 8],
            },
            backbone: BackboneConfig {
                stem_patch: 4,
                stage_depths: vec![1, 1, 2, 1],
                stage_widths: vec![16, 32, 64, 128],
                embed_dim: 64,
                window: 7,
                swin_depths: vec![2],
                swin_heads: vec![2],
                head_out: 1000,
            },
            recon_weight: 1.0,
            kl_weight: 0.0,
        }
    }

    /// 8x8 miniature that still exercises every layer type, including
    /// shifted masked windows and patch merging.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: 8,
            ae: AeConfig { widths: vec![2, 3, 4] },
            vae: VaeConfig {
                enc_widths: vec![2, 3],
                dec_widths: vec![4, 3],
            },
            backbone: BackboneConfig {
                stem_patch: 2,
                stage_depths: vec![1],
                stage_widths: vec![4],
                embed_dim: 4,
                window: 2,
                swin_depths: vec![2, 1],
                swin_heads: vec![1, 2],
                head_out: 6,
            },
            recon_weight: 1.0,
            kl_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = self.image_size;
        if s == 0 {
            return bad("image_size must be positive".into());
        }
        let ae_n = self.ae.widths.len();
        if ae_n == 0 || self.ae.widths.contains(&0) {
            return bad("ae.widths must be non-empty and positive".into());
        }
        if s % (1 << ae_n) != 0 {
            return bad(format!("image_size {s} not divisible by 2^{ae_n} (ae stages)"));
        }
        let (enc, dec) = (&self.vae.enc_widths, &self.vae.dec_widths);
        if enc.is_empty() || dec.is_empty() || enc.contains(&0) || dec.contains(&0) {
            return bad("vae widths must be non-empty and positive".into());
        }
        if s % (1 << enc.len()) != 0 {
            return bad(format!("image_size {s} not divisible by 2^{} (vae encoder)", enc.len()));
        }
        if s % (2 << dec.len()) != 0 {
            return bad(format!(
                "image_size/2 = {} not divisible by 2^{} (vae decoder)",
                s / 2,
                dec.len()
            ));
        }
        let b = &self.backbone;
        if b.stage_depths.is_empty() || b.stage_depths.len() != b.stage_widths.len() {
            return bad("backbone stage_depths and stage_widths must have equal, non-zero length".into());
        }
        if b.stem_patch == 0 || b.embed_dim == 0 || b.window == 0 || b.head_out == 0 {
            return bad("backbone sizes must be positive".into());
        }
        let down = b.stem_patch << (b.stage_depths.len() - 1);
        if s % down != 0 {
            return bad(format!("image_size {s} not divisible by backbone downsampling {down}"));
        }
        if b.swin_depths.is_empty() || b.swin_depths.len() != b.swin_heads.len() {
            return bad("swin_depths and swin_heads must have equal, non-zero length".into());
        }
        let mut grid = s / down;
        for (i, &heads) in b.swin_heads.iter().enumerate() {
            let dim = b.embed_dim << i;
            if i > 0 {
                if grid % 2 != 0 {
                    return bad(format!("patch merging needs an even grid, stage {i} has {grid}"));
                }
                grid /= 2;
            }
            if heads == 0 || dim % heads != 0 {
                return bad(format!("swin stage {i}: dim {dim} not divisible by {heads} heads"));
            }
        }
        if !(self.recon_weight.is_finite() && self.kl_weight.is_finite()) {
            return bad("loss weights must be finite".into());
        }
        Ok(())
    }

    /// `[C, h, w]` of the autoencoder latent.
    pub fn ae_latent_shape(&self) -> [usize; 3] {
        let g = self.image_size >> self.ae.widths.len();
        [*self.ae.widths.last().unwrap(), g, g]
    }

    /// `[C, h, w]` of the VAE encoder output before flattening.
    pub fn vae_enc_shape(&self) -> [usize; 3] {
        let g = self.image_size >> self.vae.enc_widths.len();
        [*self.vae.enc_widths.last().unwrap(), g, g]
    }

    pub fn vae_enc_flat(&self) -> usize {
        self.vae_enc_shape().iter().product()
    }

    /// `[C, h, w]` the latent vector is reinterpreted as for decoding.
    pub fn vae_latent_shape(&self) -> [usize; 3] {
        let g = self.recon_size() >> self.vae.dec_widths.len();
        [self.vae.dec_widths[0], g, g]
    }

    pub fn latent_dim(&self) -> usize {
        self.vae_latent_shape().iter().product()
    }

    /// Side of network B's reconstruction.
    pub fn recon_size(&self) -> usize {
        self.image_size / 2
    }

    /// Side of the ConvNeXt output grid.
    pub fn fmap_grid(&self) -> usize {
        let b = &self.backbone;
        self.image_size / (b.stem_patch << (b.stage_depths.len() - 1))
    }

    pub fn swin_stages(&self) -> Vec<SwinStage> {
        let b = &self.backbone;
        let mut grid = self.fmap_grid();
        b.swin_depths
            .iter()
            .zip(&b.swin_heads)
            .enumerate()
            .map(|(i, (&depth, &heads))| {
                if i > 0 {
                    grid /= 2;
                }
                SwinStage {
                    grid,
                    dim: b.embed_dim << i,
                    heads,
                    depth,
                    window: b.window.min(grid),
                }
            })
            .collect()
    }

    /// Width of the concatenated two-branch feature entering each head.
    pub fn head_in(&self) -> usize {
        2 * self.backbone.head_out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::tiny(), ModelConfig::toy(), ModelConfig::micro()] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn tiny_geometry() {
        let c = ModelConfig::tiny();
        assert_eq!(c.ae_latent_shape(), [256, 7, 7]);
        assert_eq!(c.vae_enc_flat(), 25088);
        assert_eq!(c.vae_latent_shape(), [256, 7, 7]);
        assert_eq!(c.latent_dim(), 12544);
        assert_eq!(12544, 256 * 7 * 7);
        assert_eq!(c.recon_size(), 112);
        assert_eq!(c.fmap_grid(), 7);
        let s = c.swin_stages();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].grid, s[0].dim, s[0].window, s[0].shift(1)), (7, 768, 7, 0));
        assert_eq!(c.head_in(), 2000);
    }

    #[test]
    fn toy_and_micro_geometry() {
        let c = ModelConfig::toy();
        assert_eq!(c.ae_latent_shape(), [64, 2, 2]);
        assert_eq!(c.fmap_grid(), 2);
        assert_eq!(c.latent_dim(), 256);
        let m = ModelConfig::micro();
        let s = m.swin_stages();
        assert_eq!((s[0].grid, s[0].window, s[0].shift(1)), (4, 2, 1));
        assert_eq!((s[1].grid, s[1].dim, s[1].window), (2, 8, 2));
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut c = ModelConfig::toy();
        c.image_size = 60;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.backbone.swin_heads = vec![3];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::micro();
        c.backbone.swin_depths = vec![1, 1, 1, 1];
        c.backbone.swin_heads = vec![1, 1, 1, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_parse() {
        assert_eq!("toy".parse::<Preset>().unwrap(), Preset::Toy);
        assert!("huge".parse::<Preset>().is_err());
    }
}
