//! Deterministic inputs for the benchmarks.

use fsseg_core::harness::two_blob_fixture;
use fsseg_core::{RgbImage, Tensor};

/// Smooth pseudo-random values in `[-1, 1]`, no RNG needed.
pub fn wave(shape: &[usize], phase: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f32 * 0.7371 + phase).sin() * 43758.547).fract() * 2.0 - 1.0)
}

/// Two-blob image of side `size`.
pub fn blob_image(size: usize) -> RgbImage {
    two_blob_fixture(0, size).image
}
