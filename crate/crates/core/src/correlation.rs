//! Masked features and 4D cosine correlation pyramids.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::mask::MaskMap;
use crate::tensor::{bilinear_resize, expect_rank, Tensor};

/// Resizes `mask` to `h x w` bilinearly and repeats it over `channels`.
pub fn mask_project(mask: &MaskMap, channels: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let plane = bilinear_resize(&mask.to_tensor(), h, w)?;
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(plane.data());
    }
    Tensor::new([channels, h, w], data)
}

/// `F * zeta(M)` with the projected mask used as soft weights.
pub fn masked_feature(f: &Tensor<f32>, mask: &MaskMap) -> Result<Tensor<f32>> {
    expect_rank(f.shape(), 3, "feature map")?;
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let plane = bilinear_resize(&mask.to_tensor(), h, w)?;
    let hw = h * w;
    let data = f
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * plane.data()[i % hw])
        .collect();
    Tensor::new(f.shape().to_vec(), data)
}

/// Pixel vectors of a `C x H x W` map as unit-norm rows, in `f64`.
/// Zero vectors stay zero.
fn unit_rows(f: &Tensor<f32>) -> Vec<f64> {
    let (c, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    let mut rows = vec![0.0f64; hw * c];
    for p in 0..hw {
        let row = &mut rows[p * c..(p + 1) * c];
        for (ch, r) in row.iter_mut().enumerate() {
            *r = f.data()[ch * hw + p] as f64;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    rows
}

/// `C(i, j) = max(0, cos(Fq(i), Fs(j)))` with shape `Hq x Wq x Hs x Ws`.
///
/// Positions holding a zero vector on either side correlate to 0.
pub fn correlation_4d(fq: &Tensor<f32>, fs: &Tensor<f32>) -> Result<Tensor<f32>> {
    expect_rank(fq.shape(), 3, "query feature")?;
    expect_rank(fs.shape(), 3, "support feature")?;
    if fq.shape() != fs.shape() {
        return Err(Error::ShapeMismatch {
            expected: fq.shape().to_vec(),
            got: fs.shape().to_vec(),
        });
    }
    let (c, h, w) = (fq.shape()[0], fq.shape()[1], fq.shape()[2]);
    let n = h * w;
    let q = unit_rows(fq);
    let s = unit_rows(fs);
    let mut out = vec![0.0f32; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let qi = &q[i * c..(i + 1) * c];
        for (j, o) in row.iter_mut().enumerate() {
            let sj = &s[j * c..(j + 1) * c];
            let dot: f64 = qi.iter().zip(sj).map(|(a, b)| a * b).sum();
            *o = dot.clamp(0.0, 1.0) as f32;
        }
    });
    Ok(Tensor::from_parts(vec![h, w, h, w], out))
}

/// Stacked correlations per pyramid layer, finest first. Layer `p` has
/// shape `|L_p| x H_p x W_p x H_p x W_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct HypercorrelationPyramid {
    layers: Vec<Tensor<f32>>,
}

impl HypercorrelationPyramid {
    pub fn new(layers: Vec<Tensor<f32>>) -> Result<Self> {
        for l in &layers {
            expect_rank(l.shape(), 5, "pyramid layer")?;
            let s = l.shape();
            if s[1] != s[3] || s[2] != s[4] {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "query and support grids differ".into(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor<f32>] {
        &self.layers
    }

    pub fn layer(&self, p: usize) -> &Tensor<f32> {
        &self.layers[p]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn into_layers(self) -> Vec<Tensor<f32>> {
        self.layers
    }
}

/// Correlates every pyramid level of `q` with the masked matching level of
/// `s`. Levels within a layer are stacked in ascending depth.
pub fn build_pyramid(q: &FeatureStack, s: &FeatureStack, mask: &MaskMap) -> Result<HypercorrelationPyramid> {
    if !q.compatible_with(s) {
        return Err(Error::GroupingMismatch(format!(
            "query '{}' and support '{}' have different pyramid layouts",
            q.image_id, s.image_id
        )));
    }
    let pairs: Vec<(usize, usize)> = q
        .groups()
        .iter()
        .zip(s.groups())
        .flat_map(|(a, b)| a.iter().copied().zip(b.iter().copied()))
        .collect();
    let corrs = pairs
        .par_iter()
        .map(|&(lq, ls)| {
            let fs = masked_feature(s.level(ls), mask)?;
            correlation_4d(q.level(lq), &fs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = corrs.into_iter();
    let mut layers = Vec::with_capacity(q.pyramid_layers());
    for (p, g) in q.groups().iter().enumerate() {
        let (h, w) = q.layer_size(p);
        let mut data = Vec::with_capacity(g.len() * h * w * h * w);
        for _ in g {
            data.extend_from_slice(it.next().expect("one per level").data());
        }
        layers.push(Tensor::from_parts(vec![g.len(), h, w, h, w], data));
    }
    HypercorrelationPyramid::new(layers)
}

/// Correlation of the query with itself masked by `mask`.
pub fn self_correlation(q: &FeatureStack, mask: &MaskMap) -> Result<HypercorrelationPyramid> {
    build_pyramid(q, q, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_feat(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
        Tensor::from_fn([c, h, w], |_| rng.random_range(-1.0f32..1.0))
    }

    fn rand_mask(h: usize, w: usize, rng: &mut impl Rng) -> MaskMap {
        MaskMap::from_fn(h, w, |_, _| rng.random_bool(0.5))
    }

    /// Pairwise cosine computed one entry at a time.
    fn cosine_oracle(fq: &Tensor<f32>, fs: &Tensor<f32>) -> Vec<f64> {
        let (c, h, w) = (fq.shape()[0], fq.shape()[1], fq.shape()[2]);
        let at = |t: &Tensor<f32>, ch: usize, y: usize, x: usize| t.data()[(ch * h + y) * w + x] as f64;
        let mut out = Vec::new();
        for yq in 0..h {
            for xq in 0..w {
                for ys in 0..h {
                    for xs in 0..w {
                        let (mut dot, mut nq, mut ns) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            let (a, b) = (at(fq, ch, yq, xq), at(fs, ch, ys, xs));
                            dot += a * b;
                            nq += a * a;
                            ns += b * b;
                        }
                        let cos = if nq == 0.0 || ns == 0.0 { 0.0 } else { dot / (nq.sqrt() * ns.sqrt()) };
                        out.push(cos.max(0.0));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn mask_projection_extremes() {
        let ones = mask_project(&MaskMap::ones(16, 16), 3, 4, 4).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let zeros = mask_project(&MaskMap::zeros(16, 16), 3, 4, 4).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_plane_projection_has_soft_boundary_column() {
        // boundary at column 126: output column 31 samples source 125.5
        let m = MaskMap::from_fn(256, 256, |_, x| x < 126);
        let p = mask_project(&m, 1, 64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let v = p.data()[y * 64 + x];
                let pos = ((x as f64 + 0.5) * 4.0 - 0.5).max(0.0);
                let (x0, f) = (pos.floor() as usize, pos.fract());
                let src = |c: usize| if c.min(255) < 126 { 1.0 } else { 0.0 };
                let expect = src(x0) * (1.0 - f) + src(x0 + 1) * f;
                assert!((v as f64 - expect).abs() < 1e-7);
                match x {
                    31 => assert!(v > 0.0 && v < 1.0),
                    _ => assert!(v == 0.0 || v == 1.0),
                }
            }
        }
    }

    #[test]
    fn masked_feature_matches_elementwise_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_feat(3, 5, 6, &mut rng);
        assert_eq!(masked_feature(&f, &MaskMap::ones(5, 6)).unwrap(), f);
        assert!(masked_feature(&f, &MaskMap::zeros(5, 6)).unwrap().data().iter().all(|&v| v == 0.0));
        let m = rand_mask(5, 6, &mut rng);
        let g = masked_feature(&f, &m).unwrap();
        for ch in 0..3 {
            for y in 0..5 {
                for x in 0..6 {
                    let i = (ch * 5 + y) * 6 + x;
                    let w = if m.get(y, x) { 1.0 } else { 0.0 };
                    assert_eq!(g.data()[i], f.data()[i] * w);
                }
            }
        }
    }

    #[test]
    fn correlation_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fq = rand_feat(4, 8, 8, &mut rng);
        let fs = masked_feature(&rand_feat(4, 8, 8, &mut rng), &rand_mask(8, 8, &mut rng)).unwrap();
        let c = correlation_4d(&fq, &fs).unwrap();
        let oracle = cosine_oracle(&fq, &fs);
        let err = c.data().iter().zip(&oracle).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn diagonal_and_orthogonal_entries() {
        // four unit vectors along distinct axes on a 2x2 grid
        let f = Tensor::from_fn([4, 2, 2], |i| if i % 5 == 0 { 1.0f32 } else { 0.0 });
        let c = correlation_4d(&f, &f).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c.data()[i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn toy_pyramid_shape_and_zero_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = crate::RgbImage::from_fn(32, 32, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let q = crate::features::toy_extract_features(&img).unwrap();
        let pyr = build_pyramid(&q, &q, &MaskMap::ones(32, 32)).unwrap();
        assert_eq!(pyr.len(), 3);
        assert_eq!(pyr.layer(0).shape(), &[2, 8, 8, 8, 8]);
        assert_eq!(pyr.layer(1).shape(), &[2, 4, 4, 4, 4]);
        // diagonal holds each level's maximum
        for layer in pyr.layers() {
            let n = layer.shape()[1] * layer.shape()[2];
            for l in 0..layer.shape()[0] {
                let block = &layer.data()[l * n * n..(l + 1) * n * n];
                let max = block.iter().cloned().fold(0.0f32, f32::max);
                for i in 0..n {
                    assert_eq!(block[i * n + i], max);
                }
            }
        }
        let zero = build_pyramid(&q, &q, &MaskMap::zeros(32, 32)).unwrap();
        assert!(zero.layers().iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
        assert_eq!(self_correlation(&q, &MaskMap::ones(32, 32)).unwrap(), pyr);
    }

    #[test]
    fn incompatible_stacks_are_rejected() {
        let a = FeatureStack::with_inferred_groups("a", vec![Tensor::zeros([2, 4, 4])]).unwrap();
        let b = FeatureStack::with_inferred_groups("b", vec![Tensor::zeros([3, 4, 4])]).unwrap();
        assert!(matches!(build_pyramid(&a, &b, &MaskMap::ones(4, 4)), Err(Error::GroupingMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn entries_in_unit_interval_and_transpose_symmetric(
            seed in any::<u64>(), c in 1usize..5, h in 1usize..5, w in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_feat(c, h, w, &mut rng);
            let b = rand_feat(c, h, w, &mut rng);
            let ab = correlation_4d(&a, &b).unwrap();
            let ba = correlation_4d(&b, &a).unwrap();
            let n = h * w;
            prop_assert!(ab.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(ab.data()[i * n + j], ba.data()[j * n + i]);
                }
            }
        }

        #[test]
        fn positive_rescaling_leaves_rows_unchanged(
            seed in any::<u64>(), scale in 0.01f32..100.0, pick in 0usize..16,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_feat(3, 4, 4, &mut rng);
            let b = rand_feat(3, 4, 4, &mut rng);
            let mut a2 = a.clone();
            for ch in 0..3 {
                a2.data_mut()[ch * 16 + pick] *= scale;
            }
            let c1 = correlation_4d(&a, &b).unwrap();
            let c2 = correlation_4d(&a2, &b).unwrap();
            for (x, y) in c1.data()[pick * 16..(pick + 1) * 16].iter().zip(&c2.data()[pick * 16..(pick + 1) * 16]) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
