//! Shared fixtures for the benchmarks.

use dgae_core::tensor::Tensor;

/// Deterministic pseudo-image batch in `[-1, 1]`.
pub fn image_batch(n: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 3, size, size], |i| ((i as f32) * 0.618_034).sin())
}
