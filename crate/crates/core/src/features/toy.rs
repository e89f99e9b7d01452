//! Deterministic stand-in for a pretrained backbone.
//!
//! The image is box-averaged to stride 4, then passed through a bank of
//! fixed random 3x3 filters with `tanh` activations. Every filter is
//! isotropic (one weight for the centre tap, one shared by the four edge
//! taps and one shared by the four corners), so the extractor commutes with
//! 90 degree rotations of the input. The semantic level is a pointwise
//! projection of the pooled colours, which keeps region boundaries sharp.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::FeatureStack;
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};
use crate::RgbImage;

/// Seed of the toy filter bank.
pub const TOY_SEED: u64 = 42;

/// Index of the semantic level in toy stacks.
const SEMANTIC_LEVEL: usize = 6;

struct Layer {
    kernel: Tensor<f32>,
    bias: Tensor<f32>,
}

/// Fixed random filter bank.
pub struct ToyBackbone {
    layers: Vec<Layer>,
}

/// `(input channels, output channels)` of each conv, in level order. The
/// last entry is the semantic branch fed from the pooled input.
const PLAN: [(usize, usize); 7] = [(3, 16), (16, 16), (16, 32), (32, 32), (32, 64), (64, 64), (3, 64)];

impl ToyBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = PLAN
            .iter()
            .enumerate()
            .map(|(li, &(cin, cout))| {
                // isotropic taps: centre + 4 edges + 4 corners
                let pointwise = li == SEMANTIC_LEVEL;
                let std = if pointwise { 2.0 / (cin as f64).sqrt() } else { (1.6 / (cin as f64 * 5.0)).sqrt() };
                let normal = Normal::new(0.0, std).expect("valid std");
                let mut k = vec![0.0f32; cout * cin * 9];
                for o in 0..cout {
                    for i in 0..cin {
                        let centre = normal.sample(&mut rng) as f32;
                        let mut edge = normal.sample(&mut rng) as f32;
                        let mut corner = normal.sample(&mut rng) as f32;
                        if pointwise {
                            (edge, corner) = (0.0, 0.0);
                        }
                        let base = (o * cin + i) * 9;
                        k[base..base + 9].copy_from_slice(&[
                            corner, edge, corner, edge, centre, edge, corner, edge, corner,
                        ]);
                    }
                }
                let bias_n = Normal::new(0.0, if pointwise { 0.5 } else { 0.1 }).expect("valid std");
                let bias = (0..cout).map(|_| bias_n.sample(&mut rng) as f32).collect();
                Layer {
                    kernel: Tensor::from_parts(vec![cout, cin, 3, 3], k),
                    bias: Tensor::from_parts(vec![cout], bias),
                }
            })
            .collect();
        Self { layers }
    }

    fn apply(&self, layer: usize, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let l = &self.layers[layer];
        let mut y = ops::conv2d_bias(x, &l.kernel, Some(&l.bias), 1, 1)?;
        y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        Ok(y)
    }

    /// Seven levels: two 16-channel maps at stride 4, two 32-channel and
    /// two 64-channel maps at stride 8, and a 64-channel semantic map at
    /// stride 4. Pyramid groups are `[0,1]`, `[2,3]`, `[4,5]`.
    pub fn extract(&self, image: &RgbImage, image_id: impl Into<String>) -> Result<FeatureStack> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
            return Err(Error::NonDivisibleSize(w, h));
        }
        let rgb = rgb_tensor(image);
        let x = box_pool(&rgb, 4);
        let l0 = self.apply(0, &x)?;
        let l1 = self.apply(1, &l0)?;
        let l2 = self.apply(2, &box_pool(&l1, 2))?;
        let l3 = self.apply(3, &l2)?;
        let l4 = self.apply(4, &l3)?;
        let l5 = self.apply(5, &l4)?;
        let sem = self.apply(6, &x)?;
        FeatureStack::new(
            image_id,
            vec![l0, l1, l2, l3, l4, l5, sem],
            vec![vec![0, 1], vec![2, 3], vec![4, 5]],
            Some(SEMANTIC_LEVEL),
        )
    }
}

/// Extracts toy features with the default seed.
pub fn toy_extract_features(image: &RgbImage) -> Result<FeatureStack> {
    ToyBackbone::new(TOY_SEED).extract(image, "")
}

/// `3 x H x W` tensor with channels scaled to `[-1, 1]`.
pub(crate) fn rgb_tensor(image: &RgbImage) -> Tensor<f32> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in image.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Non-overlapping box average by `f` along both spatial axes.
fn box_pool(x: &Tensor<f32>, f: usize) -> Tensor<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0.0f32; c * ho * wo];
    let norm = 1.0 / (f * f) as f32;
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += x.data()[(ch * h + oy * f + dy) * w + ox * f + dx];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc * norm;
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}
