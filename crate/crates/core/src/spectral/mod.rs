//! Training-free segmentation from the spectrum of a pixel affinity graph.

mod affinity;
mod eigen;
mod hsv;
mod threshold;

pub use affinity::{affinity_combine, affinity_knn, affinity_semantic, SparseMatrix, SEMANTIC_DROP};
pub use eigen::{
    degrees, eigensolve, eigensolve_with, laplacian_dense, normalized_adjacency, EigenPair, EigenRoute, DENSE_LIMIT,
    LANCZOS_TOL,
};
pub use hsv::{hsv_embed, rgb_to_hsv, PixelEmbedding};
pub use threshold::{adaptive_threshold, multi_otsu, otsu_bins, otsu_histogram, otsu_thresholds, OTSU_BINS};

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::mask::MaskMap;
use crate::tensor::{bilinear_resize, Tensor};
use crate::RgbImage;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralParams {
    /// Weight of the colour-position affinity.
    pub alpha: f64,
    /// Eigenvectors computed, including the constant one.
    pub n_eig: usize,
    pub k: usize,
    pub otsu_classes: usize,
    /// Adaptive-threshold window in semantic-grid pixels.
    pub block: usize,
    /// Adaptive-threshold offset as a fraction of the eigenmap's range.
    pub offset: f64,
    pub route: EigenRoute,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            n_eig: 5,
            k: 10,
            otsu_classes: 2,
            block: 11,
            offset: 0.01,
            route: EigenRoute::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Eigensegment {
    pub index: usize,
    pub eigenvalue: f64,
    /// Eigenvector resized to image resolution, `[H, W]`.
    pub soft: Tensor<f64>,
    pub otsu: MaskMap,
    pub adaptive: MaskMap,
    pub mask: MaskMap,
}

/// Combined affinity `Z_sem + alpha Z_knn` on the grid of `semantic`.
pub fn affinity_graph(image: &RgbImage, semantic: &Tensor<f32>, params: &SpectralParams) -> Result<SparseMatrix> {
    let (h, w) = (semantic.shape()[1], semantic.shape()[2]);
    let emb = hsv_embed(image, h, w);
    affinity_combine(&affinity_semantic(semantic)?, &affinity_knn(&emb, params.k)?, params.alpha)
}

/// Full-resolution window for a grid window of `block` cells: scaled by
/// the grid stride and rounded up to odd.
pub fn full_res_block(block: usize, image_h: usize, grid_h: usize) -> usize {
    let b = (block * image_h).div_ceil(grid_h).max(1);
    b | 1
}

/// Eigensegments `1..n_eig` of `image` using the semantic level of `features`.
pub fn eigensegments(image: &RgbImage, features: &FeatureStack, params: &SpectralParams) -> Result<Vec<Eigensegment>> {
    let semantic = features.semantic().ok_or(Error::MissingSemantic)?;
    eigensegments_from(image, semantic, params)
}

pub fn eigensegments_from(
    image: &RgbImage,
    semantic: &Tensor<f32>,
    params: &SpectralParams,
) -> Result<Vec<Eigensegment>> {
    crate::tensor::expect_rank(semantic.shape(), 3, "semantic features")?;
    let (gh, gw) = (semantic.shape()[1], semantic.shape()[2]);
    let (ih, iw) = (image.height() as usize, image.width() as usize);
    let z = affinity_graph(image, semantic, params)?;
    let pairs = eigensolve_with(&z, params.n_eig, params.route)?;
    let block = full_res_block(params.block, ih, gh);
    pairs
        .into_iter()
        .enumerate()
        .skip(1)
        .map(|(index, pair)| {
            let grid = Tensor::new([1, gh, gw], pair.vector)?;
            let soft = bilinear_resize(&grid, ih, iw)?.reshape([ih, iw])?;
            let otsu = multi_otsu(&soft, params.otsu_classes)?;
            let adaptive = adaptive_threshold(&soft, block, params.offset)?;
            let mask = otsu.and(&adaptive)?;
            Ok(Eigensegment {
                index,
                eigenvalue: pair.value,
                soft,
                otsu,
                adaptive,
                mask,
            })
        })
        .collect()
}
