use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mask::MaskMap;
use crate::RgbImage;

/// Image split into two regions of distinct colour: an elliptical blob
/// and the background around it.
#[derive(Clone, Debug)]
pub struct TwoBlobFixture {
    pub image: RgbImage,
    /// `[blob, complement]`.
    pub blobs: [MaskMap; 2],
}

/// 8-bit RGB from hue in degrees, saturation and value in `[0, 1]`.
pub(crate) fn hsv_rgb(hue: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = hue.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|t| ((t + m) * 255.0).round() as u8)
}

/// Deterministic two-blob fixture of side `size` (a multiple of 8).
pub fn two_blob_fixture(seed: u64, size: usize) -> TwoBlobFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let hue = rng.random_range(0.0..360.0);
    let bg = hsv_rgb(hue, rng.random_range(0.3..0.6), rng.random_range(0.35..0.6));
    let fg = hsv_rgb(hue + rng.random_range(120.0..240.0), rng.random_range(0.7..1.0), rng.random_range(0.75..1.0));
    let (ry, rx) = (rng.random_range(0.2 * s..0.3 * s), rng.random_range(0.2 * s..0.3 * s));
    let cy = rng.random_range(ry + 0.05 * s..s - ry - 0.05 * s);
    let cx = rng.random_range(rx + 0.05 * s..s - rx - 0.05 * s);
    let blob = MaskMap::from_fn(size, size, |y, x| {
        ((y as f64 + 0.5 - cy) / ry).powi(2) + ((x as f64 + 0.5 - cx) / rx).powi(2) <= 1.0
    });
    let image = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let c = if blob.get(y as usize, x as usize) { fg } else { bg };
        Rgb(c.map(|v| (v as i32 + rng.random_range(-6..=6)).clamp(0, 255) as u8))
    });
    let rest = MaskMap::from_fn(size, size, |y, x| !blob.get(y, x));
    TwoBlobFixture {
        image,
        blobs: [blob, rest],
    }
}
