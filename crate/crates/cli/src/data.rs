//! Deterministic sample streams and batch assembly.

use std::path::PathBuf;

use genconvit_core::datapipe::{augment, load_rgb, normalize, pick, AugmentConfig, Normalization, SampleMode, VideoRecord};
use genconvit_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Stream tags, so that no two purposes share random numbers.
pub mod tag {
    pub const FRAMES: u64 = 1;
    pub const ORDER: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const NOISE: u64 = 4;
}

/// Seed for the stream identified by `parts` under `seed` (splitmix64).
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts
        .iter()
        .fold(mix(seed), |h, &p| mix(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ p))
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, parts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
}

/// This epoch's training frames: `per_video` random frames of each video.
pub fn epoch_samples(videos: &[&VideoRecord], per_video: usize, seed: u64, epoch: usize) -> Vec<Sample> {
    videos
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            let s = stream_seed(seed, &[tag::FRAMES, epoch as u64, i as u64]);
            pick(&v.frames, per_video, SampleMode::Random, s)
                .into_iter()
                .map(|path| Sample {
                    path,
                    label: v.label.index(),
                })
        })
        .collect()
}

/// A shuffled visiting order for one network's batch stream.
pub fn epoch_order(n: usize, seed: u64, net: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed, &[tag::ORDER, net, epoch as u64]));
    order
}

/// Maps `f` over `items` in order, in parallel when built with rayon.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub struct BatchSpec<'a> {
    pub size: usize,
    pub norm: &'a Normalization,
    pub augment: &'a AugmentConfig,
    pub seed: u64,
    pub net: u64,
    pub epoch: usize,
}

/// Loads, augments and normalizes `indices` of `samples` into one
/// `B x 3 x S x S` batch. Each sample's augmentation draws from its own
/// stream, so batches do not depend on the thread count.
pub fn load_batch(samples: &[Sample], indices: &[usize], spec: &BatchSpec<'_>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let frames = par_map(indices, |&i| -> Result<Tensor<f32>> {
        let img = load_rgb(&samples[i].path)?;
        let mut r = rng(spec.seed, &[tag::AUGMENT, spec.net, spec.epoch as u64, i as u64]);
        let out = augment(&img, spec.augment, &mut r);
        Ok(normalize(&out.image, spec.size, spec.norm))
    });
    let frames = frames.into_iter().collect::<Result<Vec<_>>>()?;
    let labels = indices.iter().map(|&i| samples[i].label).collect();
    Ok((Tensor::stack(&frames)?, labels))
}

/// Unaugmented frames of one video, evenly spaced.
pub fn video_frames(paths: &[PathBuf], n: usize, size: usize, norm: &Normalization) -> Result<Vec<Tensor<f32>>> {
    let chosen = pick(paths, n, SampleMode::Uniform, 0);
    chosen
        .iter()
        .map(|p| Ok(normalize(&load_rgb(p)?, size, norm)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ_by_every_part() {
        let base = stream_seed(1, &[2, 3]);
        assert_eq!(base, stream_seed(1, &[2, 3]));
        assert_ne!(base, stream_seed(0, &[2, 3]));
        assert_ne!(base, stream_seed(1, &[3, 2]));
        assert_ne!(base, stream_seed(1, &[2, 3, 0]));
    }

    #[test]
    fn order_is_a_seeded_permutation() {
        let o = epoch_order(50, 7, 0, 1);
        let mut sorted = o.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(o, epoch_order(50, 7, 0, 1));
        assert_ne!(o, epoch_order(50, 7, 1, 1));
        assert_ne!(o, epoch_order(50, 7, 0, 2));
    }
}
