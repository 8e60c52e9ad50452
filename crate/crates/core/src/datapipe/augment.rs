//! The eleven-transform augmentation suite. Parameter defaults follow the
//! conventional ranges of the same-named transforms in common image
//! augmentation libraries.

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    RandomRotate90,
    Transpose,
    HorizontalFlip,
    VerticalFlip,
    GaussNoise,
    ShiftScaleRotate,
    Clahe,
    Sharpen,
    Emboss,
    RandomBrightnessContrast,
    HueSaturationValue,
}

impl Transform {
    /// Application order.
    pub const ALL: [Transform; 11] = [
        Transform::RandomRotate90,
        Transform::Transpose,
        Transform::HorizontalFlip,
        Transform::VerticalFlip,
        Transform::GaussNoise,
        Transform::ShiftScaleRotate,
        Transform::Clahe,
        Transform::Sharpen,
        Transform::Emboss,
        Transform::RandomBrightnessContrast,
        Transform::HueSaturationValue,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability that a sample is augmented at all.
    pub rate: f64,
    /// Inclusion probability of each transform within an augmented draw.
    pub transform_p: f64,
    /// Gaussian noise variance range, in squared 8-bit levels.
    pub noise_var: (f64, f64),
    /// Shift as a fraction of the side.
    pub shift_limit: f64,
    pub scale_limit: f64,
    /// Degrees.
    pub rotate_limit: f64,
    pub clahe_clip: (f64, f64),
    pub clahe_tiles: usize,
    pub sharpen_alpha: (f64, f64),
    pub sharpen_lightness: (f64, f64),
    pub emboss_alpha: (f64, f64),
    pub emboss_strength: (f64, f64),
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    /// Hue shift on the 0..180 half-degree scale.
    pub hue_shift: f64,
    pub sat_shift: f64,
    pub val_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rate: 0.9,
            transform_p: 0.5,
            noise_var: (10.0, 50.0),
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit: 45.0,
            clahe_clip: (1.0, 4.0),
            clahe_tiles: 8,
            sharpen_alpha: (0.2, 0.5),
            sharpen_lightness: (0.5, 1.0),
            emboss_alpha: (0.2, 0.5),
            emboss_strength: (0.2, 0.7),
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            hue_shift: 20.0,
            sat_shift: 30.0,
            val_shift: 20.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.rate) || !unit(self.transform_p) {
            return Err(Error::Config("augment rate and transform_p must lie in [0, 1]".into()));
        }
        let ranges = [
            ("noise_var", self.noise_var),
            ("clahe_clip", self.clahe_clip),
            ("sharpen_alpha", self.sharpen_alpha),
            ("sharpen_lightness", self.sharpen_lightness),
            ("emboss_alpha", self.emboss_alpha),
            ("emboss_strength", self.emboss_strength),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::Config(format!("augment {name} range ({lo}, {hi})")));
            }
        }
        let limits = [
            self.shift_limit,
            self.scale_limit,
            self.rotate_limit,
            self.brightness_limit,
            self.contrast_limit,
            self.hue_shift,
            self.sat_shift,
            self.val_shift,
        ];
        if limits.iter().any(|l| !l.is_finite() || *l < 0.0) || self.clahe_tiles == 0 || self.scale_limit >= 1.0 {
            return Err(Error::Config("augment limits must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: RgbImage,
    pub applied: bool,
    pub used: Vec<Transform>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, limit: f64) -> f64 {
    uniform(rng, (-limit, limit))
}

/// With probability `cfg.rate`, applies each transform in
/// [`Transform::ALL`] order with probability `cfg.transform_p`.
pub fn augment<R: Rng + ?Sized>(img: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> Augmented {
    if !rng.gen_bool(cfg.rate) {
        return Augmented {
            image: img.clone(),
            applied: false,
            used: Vec::new(),
        };
    }
    let mut out = img.clone();
    let mut used = Vec::new();
    for t in Transform::ALL {
        if rng.gen_bool(cfg.transform_p) && apply(&mut out, t, cfg, rng) {
            used.push(t);
        }
    }
    Augmented {
        image: out,
        applied: true,
        used,
    }
}

/// Applies one transform with freshly sampled parameters. Returns false
/// when it cannot keep the image size (rotations of non-square images).
pub fn apply<R: Rng + ?Sized>(img: &mut RgbImage, t: Transform, cfg: &AugmentConfig, rng: &mut R) -> bool {
    let square = img.width() == img.height();
    match t {
        Transform::RandomRotate90 => {
            let k = if square { rng.gen_range(1..4) } else { 2 };
            *img = match k {
                1 => imageops::rotate90(img),
                2 => imageops::rotate180(img),
                _ => imageops::rotate270(img),
            };
        }
        Transform::Transpose => {
            if !square {
                return false;
            }
            *img = transpose(img);
        }
        Transform::HorizontalFlip => imageops::flip_horizontal_in_place(img),
        Transform::VerticalFlip => imageops::flip_vertical_in_place(img),
        Transform::GaussNoise => {
            let sigma = uniform(rng, cfg.noise_var).sqrt();
            gauss_noise(img, sigma, rng);
        }
        Transform::ShiftScaleRotate => {
            let angle = symmetric(rng, cfg.rotate_limit).to_radians();
            let scale = 1.0 + symmetric(rng, cfg.scale_limit);
            let dx = symmetric(rng, cfg.shift_limit);
            let dy = symmetric(rng, cfg.shift_limit);
            *img = shift_scale_rotate(img, dx, dy, scale, angle);
        }
        Transform::Clahe => {
            let clip = uniform(rng, cfg.clahe_clip);
            *img = clahe_luma(img, clip, cfg.clahe_tiles);
        }
        Transform::Sharpen => {
            let alpha = uniform(rng, cfg.sharpen_alpha);
            let light = uniform(rng, cfg.sharpen_lightness);
            *img = convolve3(img, &sharpen_kernel(alpha, light));
        }
        Transform::Emboss => {
            let alpha = uniform(rng, cfg.emboss_alpha);
            let strength = uniform(rng, cfg.emboss_strength);
            *img = convolve3(img, &emboss_kernel(alpha, strength));
        }
        Transform::RandomBrightnessContrast => {
            let contrast = 1.0 + symmetric(rng, cfg.contrast_limit);
            let brightness = symmetric(rng, cfg.brightness_limit) * 255.0;
            brightness_contrast(img, brightness, contrast);
        }
        Transform::HueSaturationValue => {
            let h = symmetric(rng, cfg.hue_shift);
            let s = symmetric(rng, cfg.sat_shift);
            let v = symmetric(rng, cfg.val_shift);
            hue_saturation_value(img, h, s, v);
        }
    }
    true
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn transpose(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.height(), img.width(), |x, y| *img.get_pixel(y, x))
}

pub fn gauss_noise<R: Rng + ?Sized>(img: &mut RgbImage, sigma: f64, rng: &mut R) {
    let normal = Normal::new(0.0, sigma.max(0.0)).unwrap();
    for v in img.iter_mut() {
        *v = to_u8(*v as f64 + normal.sample(rng));
    }
}

/// Reflect without repeating the edge: `-1 -> 1`, `n -> n - 2`.
fn reflect101(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut out = [0.0; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let px = reflect101(x0 as i64 + dx, w);
            let py = reflect101(y0 as i64 + dy, h);
            let p = img.get_pixel(px as u32, py as u32);
            for c in 0..3 {
                out[c] += wx * wy * p[c] as f64;
            }
        }
    }
    out
}

/// Affine warp about the centre: rotate by `angle` radians, scale, then
/// shift by `(dx, dy)` fractions of the size. Borders reflect.
pub fn shift_scale_rotate(img: &RgbImage, dx: f64, dy: f64, scale: f64, angle: f64) -> RgbImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let (tx, ty) = (dx * w, dy * h);
    let (sin, cos) = angle.sin_cos();
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (u, v) = (x as f64 - cx - tx, y as f64 - cy - ty);
        let sx = (cos * u + sin * v) / scale + cx;
        let sy = (-sin * u + cos * v) / scale + cy;
        let p = bilinear(img, sx, sy);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Contrast-limited adaptive histogram equalization of one 8-bit plane.
pub fn clahe(plane: &[u8], w: usize, h: usize, clip: f64, tiles: usize) -> Vec<u8> {
    let (ty, tx) = (tiles.min(h).max(1), tiles.min(w).max(1));
    let ybounds: Vec<usize> = (0..=ty).map(|i| i * h / ty).collect();
    let xbounds: Vec<usize> = (0..=tx).map(|i| i * w / tx).collect();
    let mut luts = vec![[0u8; 256]; ty * tx];
    for i in 0..ty {
        for j in 0..tx {
            let mut hist = [0u32; 256];
            for y in ybounds[i]..ybounds[i + 1] {
                for x in xbounds[j]..xbounds[j + 1] {
                    hist[plane[y * w + x] as usize] += 1;
                }
            }
            let area = ((ybounds[i + 1] - ybounds[i]) * (xbounds[j + 1] - xbounds[j])) as u32;
            let limit = ((clip * area as f64 / 256.0) as u32).max(1);
            let mut excess = 0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let (each, rest) = (excess / 256, (excess % 256) as usize);
            for (k, b) in hist.iter_mut().enumerate() {
                *b += each + u32::from(k < rest);
            }
            let mut cdf = 0u32;
            for (k, b) in hist.iter().enumerate() {
                cdf += b;
                luts[i * tx + j][k] = to_u8(cdf as f64 * 255.0 / area.max(1) as f64);
            }
        }
    }
    let centre = |bounds: &[usize], k: usize| (bounds[k] + bounds[k + 1]) as f64 / 2.0 - 0.5;
    let locate = |pos: f64, bounds: &[usize], n: usize| -> (usize, usize, f64) {
        if pos <= centre(bounds, 0) {
            return (0, 0, 0.0);
        }
        if pos >= centre(bounds, n - 1) {
            return (n - 1, n - 1, 0.0);
        }
        let k = (0..n - 1).find(|&k| pos < centre(bounds, k + 1)).unwrap();
        let (a, b) = (centre(bounds, k), centre(bounds, k + 1));
        (k, k + 1, (pos - a) / (b - a))
    };
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let (i0, i1, fy) = locate(y as f64, &ybounds, ty);
        for x in 0..w {
            let (j0, j1, fx) = locate(x as f64, &xbounds, tx);
            let v = plane[y * w + x] as usize;
            let l = |i: usize, j: usize| luts[i * tx + j][v] as f64;
            let top = l(i0, j0) * (1.0 - fx) + l(i0, j1) * fx;
            let bottom = l(i1, j0) * (1.0 - fx) + l(i1, j1) * fx;
            out[y * w + x] = to_u8(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// CLAHE on the YCbCr luma; chroma is kept by shifting every channel by
/// the luma change.
pub fn clahe_luma(img: &RgbImage, clip: f64, tiles: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let y: Vec<f64> = img.pixels().map(luma).collect();
    let plane: Vec<u8> = y.iter().map(|&v| to_u8(v)).collect();
    let eq = clahe(&plane, w, h, clip, tiles);
    let mut out = img.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        let delta = eq[i] as f64 - y[i];
        for c in 0..3 {
            p[c] = to_u8(p[c] as f64 + delta);
        }
    }
    out
}

pub fn sharpen_kernel(alpha: f64, lightness: f64) -> [f64; 9] {
    let effect = [-1.0, -1.0, -1.0, -1.0, 8.0 + lightness, -1.0, -1.0, -1.0, -1.0];
    blend_identity(alpha, effect)
}

pub fn emboss_kernel(alpha: f64, strength: f64) -> [f64; 9] {
    let s = strength;
    let effect = [-1.0 - s, -s, 0.0, -s, 1.0, s, 0.0, s, 1.0 + s];
    blend_identity(alpha, effect)
}

fn blend_identity(alpha: f64, effect: [f64; 9]) -> [f64; 9] {
    let mut k = effect.map(|v| alpha * v);
    k[4] += 1.0 - alpha;
    k
}

pub fn convolve3(img: &RgbImage, k: &[f64; 9]) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = [0.0; 3];
        for ky in 0..3 {
            for kx in 0..3 {
                let px = reflect101(x as i64 + kx as i64 - 1, w);
                let py = reflect101(y as i64 + ky as i64 - 1, h);
                let p = img.get_pixel(px as u32, py as u32);
                for c in 0..3 {
                    acc[c] += k[ky * 3 + kx] * p[c] as f64;
                }
            }
        }
        Rgb(acc.map(to_u8))
    })
}

pub fn brightness_contrast(img: &mut RgbImage, brightness: f64, contrast: f64) {
    for v in img.iter_mut() {
        *v = to_u8(*v as f64 * contrast + brightness);
    }
}

fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Shifts hue (half-degree units), saturation and value (8-bit units).
pub fn hue_saturation_value(img: &mut RgbImage, hue: f64, sat: f64, val: f64) {
    for p in img.pixels_mut() {
        let [h, s, v] = rgb_to_hsv([p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]);
        let hsv = [
            h + 2.0 * hue,
            (s + sat / 255.0).clamp(0.0, 1.0),
            (v + val / 255.0).clamp(0.0, 1.0),
        ];
        let rgb = hsv_to_rgb(hsv);
        *p = Rgb(rgb.map(|c| to_u8(c * 255.0)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 13 + y) as u8, (y * 17) as u8, ((x * y) % 251) as u8]))
    }

    #[test]
    fn rate_zero_is_identity() {
        let img = sample_image(16, 16);
        let cfg = AugmentConfig {
            rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a = augment(&img, &cfg, &mut rng);
            assert!(!a.applied);
            assert_eq!(a.image, img);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = sample_image(9, 6);
        let mut x = img.clone();
        imageops::flip_horizontal_in_place(&mut x);
        assert_ne!(x, img);
        imageops::flip_horizontal_in_place(&mut x);
        assert_eq!(x, img);
        assert_eq!(transpose(&transpose(&img)), img);
    }

    #[test]
    fn every_transform_preserves_size() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (w, h) in [(16, 16), (12, 20)] {
            for t in Transform::ALL {
                let mut img = sample_image(w, h);
                apply(&mut img, t, &cfg, &mut rng);
                assert_eq!(img.dimensions(), (w, h), "{t:?}");
            }
        }
    }

    #[test]
    fn identity_parameters_leave_image_unchanged() {
        let img = sample_image(10, 10);
        assert_eq!(shift_scale_rotate(&img, 0.0, 0.0, 1.0, 0.0), img);
        assert_eq!(convolve3(&img, &sharpen_kernel(0.0, 0.7)), img);
        assert_eq!(convolve3(&img, &emboss_kernel(0.0, 0.3)), img);
        let mut x = img.clone();
        brightness_contrast(&mut x, 0.0, 1.0);
        assert_eq!(x, img);
        let mut x = img.clone();
        hue_saturation_value(&mut x, 0.0, 0.0, 0.0);
        for (a, b) in x.pixels().zip(img.pixels()) {
            for c in 0..3 {
                assert!((a[c] as i32 - b[c] as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[1.0, 0.0, 0.0], [0.2, 0.5, 0.9], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let q = hsv_to_rgb(rgb_to_hsv(p));
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clahe_stretches_low_contrast() {
        let (w, h) = (32, 32);
        let plane: Vec<u8> = (0..w * h).map(|i| 100 + (i % 7) as u8).collect();
        let out = clahe(&plane, w, h, 4.0, 4);
        let (lo, hi) = (out.iter().min().unwrap(), out.iter().max().unwrap());
        assert!(hi - lo > 6, "{lo}..{hi}");
        let flat = clahe(&vec![50u8; w * h], w, h, 1.0, 4);
        assert!(flat.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect101(-1, 5), 1);
        assert_eq!(reflect101(5, 5), 3);
        assert_eq!(reflect101(2, 5), 2);
        assert_eq!(reflect101(-3, 1), 0);
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            rate: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            noise_var: (5.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
