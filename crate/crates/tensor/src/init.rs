use rand::Rng;

use crate::float::Float;
use crate::tensor::Tensor;

/// Kaiming-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Uniform weights in `[-bound, bound)` with 24-bit resolution. Random
/// words are drawn in blocks: the largest dense layers hold ~3*10^8 weights.
pub fn uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<F> {
    const BLOCK: usize = 1 << 14;
    let scale = 2.0 * bound / (1u32 << 24) as f64;
    let mut words = [0u32; BLOCK];
    let mut t = Tensor::zeros(shape);
    for chunk in t.data_mut().chunks_mut(BLOCK) {
        rng.fill(&mut words[..chunk.len()]);
        for (v, &u) in chunk.iter_mut().zip(&words) {
            *v = F::of(-bound + (u >> 8) as f64 * scale);
        }
    }
    t
}
