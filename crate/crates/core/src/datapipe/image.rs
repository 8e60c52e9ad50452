use std::path::Path;

use genconvit_tensor::{Float, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel `(x / 255 - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Resizes to `size x size` when needed and returns a `3 x size x size`
/// tensor.
pub fn normalize<F: Float>(img: &RgbImage, size: usize, norm: &Normalization) -> Tensor<F> {
    let resized;
    let img = if img.width() as usize != size || img.height() as usize != size {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    } else {
        img
    };
    let plane = size * size;
    let mut data = vec![F::zero(); 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = F::of((px[c] as f64 / 255.0 - norm.mean[c]) / norm.std[c]);
        }
    }
    Tensor::from_vec(&[3, size, size], data).unwrap()
}

/// Inverse of [`normalize`] up to rounding, for `3 x h x w` tensors.
pub fn denormalize<F: Float>(t: &Tensor<F>, norm: &Normalization) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            what: "denormalize",
            expected: vec![3, 0, 0],
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| {
            let v = (d[c * plane + i].as_f64() * norm.std[c] + norm.mean[c]) * 255.0;
            v.round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}
