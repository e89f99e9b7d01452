//! Few-shot segmentation engine.
//!
//! A query image is segmented from one or more annotated support images by
//! correlating backbone features ([`correlation`]), squeezing the resulting
//! 4D correlation pyramids with center-pivot convolutions
//! ([`matching`]), refining the prediction by matching the query against
//! itself, and finally fusing it with class-agnostic eigensegments obtained
//! from a pixel-affinity graph ([`spectral`], [`fusion`]). The [`harness`]
//! module samples episodes and computes mIoU.

pub mod correlation;
pub mod error;
pub mod features;
pub mod fusion;
pub mod harness;
pub mod keyvalue;
pub mod mask;
pub mod matching;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use image;
pub use features::FeatureStack;
pub use mask::MaskMap;
pub use tensor::Tensor;

/// RGB image type used across the crate.
pub type RgbImage = image::RgbImage;
