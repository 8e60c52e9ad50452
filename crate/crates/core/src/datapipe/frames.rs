use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::scan::list_frames;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Evenly spaced: index `floor(i * len / n)`.
    Uniform,
    /// The first `n` frames.
    First,
    /// A seeded random subset, kept in temporal order.
    Random,
}

pub fn frame_indices(len: usize, n: usize, mode: SampleMode, seed: u64) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    match mode {
        SampleMode::Uniform => (0..n).map(|i| i * len / n).collect(),
        SampleMode::First => (0..n).collect(),
        SampleMode::Random => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), len, n).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

pub fn pick<T: Clone>(items: &[T], n: usize, mode: SampleMode, seed: u64) -> Vec<T> {
    frame_indices(items.len(), n, mode, seed)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

/// Frame paths chosen from a video directory.
pub fn sample_frames(video_dir: &Path, n: usize, mode: SampleMode, seed: u64) -> Result<Vec<PathBuf>> {
    let frames = list_frames(video_dir, &mut Vec::new())?;
    if frames.is_empty() {
        return Err(Error::EmptyDir(video_dir.to_path_buf()));
    }
    Ok(pick(&frames, n, mode, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_spacing() {
        let idx = frame_indices(150, 15, SampleMode::Uniform, 0);
        assert_eq!(idx, (0..15).map(|i| i * 10).collect::<Vec<_>>());
        assert_eq!(frame_indices(10, 15, SampleMode::Uniform, 0), (0..10).collect::<Vec<_>>());
        assert_eq!(frame_indices(31, 30, SampleMode::Uniform, 0).len(), 30);
    }

    #[test]
    fn random_mode_is_seeded_sorted_and_distinct() {
        let a = frame_indices(40, 7, SampleMode::Random, 3);
        assert_eq!(a, frame_indices(40, 7, SampleMode::Random, 3));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(frame_indices(40, 3, SampleMode::First, 0), vec![0, 1, 2]);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            sample_frames(dir.path(), 15, SampleMode::Uniform, 0),
            Err(Error::EmptyDir(_))
        ));
    }
}
