//! Procedural face-proxy videos. Real frames are shaded, textured ellipse
//! faces with eyes and mouth; each fake video is its real twin with a
//! warped, blurred, slightly tinted patch blended over the face centre.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapipe::image::save_rgb;
use crate::datapipe::scan::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Videos per class.
    pub videos: usize,
    pub frames: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 10,
            frames: 15,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub videos_per_class: usize,
    pub real_images: usize,
    pub fake_images: usize,
}

/// Everything fixed for one video.
#[derive(Clone, Debug)]
pub struct VideoStyle {
    size: f64,
    bg: [[f64; 3]; 2],
    bg_dir: f64,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
    skin: [f64; 3],
    light: f64,
    texture_amp: f64,
    texture: Vec<f64>,
    eye_dx: f64,
    mouth_w: f64,
    tint: [f64; 3],
    warp_phase: (f64, f64),
}

/// Per-frame jitter.
#[derive(Clone, Copy, Debug)]
pub struct FramePose {
    dx: f64,
    dy: f64,
    dangle: f64,
    dlight: f64,
    noise_seed: u64,
}

impl VideoStyle {
    pub fn sample<R: Rng>(size: u32, rng: &mut R) -> Self {
        let s = size as f64;
        let color = |rng: &mut R| [rng.gen_range(20.0..230.0), rng.gen_range(20.0..230.0), rng.gen_range(20.0..230.0)];
        let r = rng.gen_range(150.0..235.0);
        let g = r * rng.gen_range(0.65..0.85);
        let b = g * rng.gen_range(0.7..0.9);
        let n = (size * size) as usize;
        VideoStyle {
            size: s,
            bg: [color(rng), color(rng)],
            bg_dir: rng.gen_range(0.0..std::f64::consts::TAU),
            center: (s * rng.gen_range(0.44..0.56), s * rng.gen_range(0.44..0.56)),
            radii: (s * rng.gen_range(0.24..0.30), s * rng.gen_range(0.30..0.36)),
            angle: rng.gen_range(-0.25..0.25),
            skin: [r, g, b],
            light: rng.gen_range(0.0..std::f64::consts::TAU),
            texture_amp: rng.gen_range(8.0..14.0),
            texture: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            eye_dx: rng.gen_range(0.32..0.42),
            mouth_w: rng.gen_range(0.22..0.34),
            tint: [rng.gen_range(3.0..6.0), rng.gen_range(-1.0..1.0), -rng.gen_range(2.0..4.0)],
            warp_phase: (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)),
        }
    }

    pub fn pose<R: Rng>(&self, rng: &mut R) -> FramePose {
        FramePose {
            dx: rng.gen_range(-1.0..1.0),
            dy: rng.gen_range(-1.0..1.0),
            dangle: rng.gen_range(-0.03..0.03),
            dlight: rng.gen_range(-0.2..0.2),
            noise_seed: rng.gen(),
        }
    }

    fn local(&self, pose: &FramePose, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = (self.center.0 + pose.dx, self.center.1 + pose.dy);
        let (sin, cos) = (self.angle + pose.dangle).sin_cos();
        let (px, py) = (x - cx, y - cy);
        ((px * cos + py * sin) / self.radii.0, (-px * sin + py * cos) / self.radii.1)
    }

    pub fn render_real(&self, pose: &FramePose) -> RgbImage {
        let size = self.size as u32;
        let (ls, lc) = (self.light + pose.dlight).sin_cos();
        let light = [0.6 * lc, 0.6 * ls, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(pose.noise_seed);
        let sensor = Normal::new(0.0, 2.0).unwrap();
        let (bs, bc) = self.bg_dir.sin_cos();
        RgbImage::from_fn(size, size, |xi, yi| {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let t = (((x / self.size - 0.5) * bc + (y / self.size - 0.5) * bs) + 0.5).clamp(0.0, 1.0);
            let bg = mix(self.bg[0], self.bg[1], t);
            let (u, v) = self.local(pose, x, y);
            let r2 = u * u + v * v;
            let alpha = smoothstep(1.0, 0.94, r2.sqrt());
            let nz = (1.0 - r2).max(0.0).sqrt();
            let shade = 0.55 + 0.45 * (u * light[0] + v * light[1] + nz * light[2]).max(0.0);
            let tex = self.texture_amp * self.texture[(yi * size + xi) as usize];
            let mut face = self.skin.map(|c| c * shade + tex);
            for side in [-1.0, 1.0] {
                let (eu, ev) = ((u - side * self.eye_dx) / 0.16, (v + 0.2) / 0.08);
                let sclera = smoothstep(1.0, 0.8, (eu * eu + ev * ev).sqrt());
                face = mix(face, [235.0, 235.0, 230.0], sclera);
                let (pu, pv) = ((u - side * self.eye_dx) / 0.06, (v + 0.2) / 0.06);
                let pupil = smoothstep(1.0, 0.7, (pu * pu + pv * pv).sqrt());
                face = mix(face, [30.0, 25.0, 20.0], pupil);
            }
            let (mu, mv) = (u / self.mouth_w, (v - 0.45) / 0.07);
            let mouth = smoothstep(1.0, 0.75, (mu * mu + mv * mv).sqrt());
            face = mix(face, [120.0, 30.0, 40.0], mouth);
            let px = mix(bg, face, alpha);
            Rgb(px.map(|c| (c + sensor.sample(&mut rng)).round().clamp(0.0, 255.0) as u8))
        })
    }

    /// Soft mask of the manipulated region.
    fn patch_mask(&self, pose: &FramePose, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(pose, x, y);
        let (a, b) = (u / 0.75, (v - 0.05) / 0.8);
        smoothstep(1.0, 0.8, (a * a + b * b).sqrt())
    }

    pub fn render_fake(&self, real: &RgbImage, pose: &FramePose) -> RgbImage {
        let size = real.width();
        let s = self.size;
        let amp = 0.8;
        let lambda = s / 4.0;
        let tau = std::f64::consts::TAU;
        let warped = RgbImage::from_fn(size, size, |xi, yi| {
            let (x, y) = (xi as f64, yi as f64);
            let sx = x + amp * (tau * y / lambda + self.warp_phase.0).sin();
            let sy = y + amp * (tau * x / lambda + self.warp_phase.1).sin();
            Rgb(sample_clamped(real, sx, sy).map(|c| c.round().clamp(0.0, 255.0) as u8))
        });
        let blurred = gaussian_blur(&warped, 1.0);
        RgbImage::from_fn(size, size, |xi, yi| {
            let m = self.patch_mask(pose, xi as f64 + 0.5, yi as f64 + 0.5);
            let r = real.get_pixel(xi, yi);
            let f = blurred.get_pixel(xi, yi);
            Rgb(std::array::from_fn(|c| {
                let patch = f[c] as f64 + self.tint[c];
                (r[c] as f64 * (1.0 - m) + patch * m).round().clamp(0.0, 255.0) as u8
            }))
        })
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t)
}

/// 0 at `edge0`, 1 at `edge1`, Hermite in between (either order).
fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn sample_clamped(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
    let (fx, fy) = (x - x0, y - y0);
    let p = |x: f64, y: f64| img.get_pixel(x as u32, y as u32).0.map(f64::from);
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    std::array::from_fn(|k| {
        (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
    })
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let k: Vec<f64> = (-2..=2).map(|i: i32| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pass = |src: &RgbImage, horizontal: bool| {
        RgbImage::from_fn(src.width(), src.height(), |x, y| {
            let mut acc = [0.0; 3];
            for (i, kv) in k.iter().enumerate() {
                let o = i as i64 - 2;
                let (sx, sy) = if horizontal {
                    ((x as i64 + o).clamp(0, w - 1), y as i64)
                } else {
                    (x as i64, (y as i64 + o).clamp(0, h - 1))
                };
                let p = src.get_pixel(sx as u32, sy as u32);
                for c in 0..3 {
                    acc[c] += kv * p[c] as f64;
                }
            }
            Rgb(acc.map(|v| (v / norm).round().clamp(0.0, 255.0) as u8))
        })
    };
    pass(&pass(img, true), false)
}

/// Real and fake frames of video `index`.
pub fn render_video(cfg: &SynthConfig, index: usize) -> (Vec<RgbImage>, Vec<RgbImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let style = VideoStyle::sample(cfg.size, &mut rng);
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for _ in 0..cfg.frames {
        let pose = style.pose(&mut rng);
        let r = style.render_real(&pose);
        fake.push(style.render_fake(&r, &pose));
        real.push(r);
    }
    (real, fake)
}

pub fn video_name(index: usize) -> String {
    format!("vid_{index:04}")
}

/// Writes `out/{real,fake}/vid_NNNN/frame_NNN.png`; fake video `i` is the
/// manipulated twin of real video `i`.
pub fn gen_synthetic(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    if cfg.videos < 1 || cfg.frames < 1 || cfg.size < 8 {
        return Err(Error::Config("synth needs videos >= 1, frames >= 1, size >= 8".into()));
    }
    for index in 0..cfg.videos {
        let (real, fake) = render_video(cfg, index);
        for (label, frames) in [(Label::Real, real), (Label::Fake, fake)] {
            let dir = out.join(label.dir_name()).join(video_name(index));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (f, img) in frames.iter().enumerate() {
                save_rgb(img, &dir.join(format!("frame_{f:03}.png")))?;
            }
        }
    }
    Ok(SynthSummary {
        videos_per_class: cfg.videos,
        real_images: cfg.videos * cfg.frames,
        fake_images: cfg.videos * cfg.frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SynthConfig {
            videos: 2,
            frames: 2,
            size: 32,
            seed: 4,
        };
        assert_eq!(render_video(&cfg, 1), render_video(&cfg, 1));
        assert_ne!(render_video(&cfg, 0).0, render_video(&cfg, 1).0);
    }

    #[test]
    fn artifact_is_present_but_subtle() {
        let cfg = SynthConfig {
            videos: 8,
            frames: 3,
            size: 64,
            seed: 7,
        };
        let (mut sum, mut count) = (0.0, 0usize);
        for v in 0..cfg.videos {
            let (real, fake) = render_video(&cfg, v);
            for (r, f) in real.iter().zip(&fake) {
                for (a, b) in r.iter().zip(f.iter()) {
                    sum += (*a as f64 - *b as f64).abs();
                    count += 1;
                }
            }
        }
        let mad = sum / count as f64;
        assert!(mad > 0.0 && mad < 0.1 * 255.0, "mean abs diff {mad}");
    }

    #[test]
    fn writes_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            videos: 2,
            frames: 3,
            size: 16,
            seed: 1,
        };
        let s = gen_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!((s.real_images, s.fake_images), (6, 6));
        for class in ["real", "fake"] {
            let p = dir.path().join(class).join("vid_0001").join("frame_002.png");
            assert!(p.is_file(), "{}", p.display());
        }
    }
}
