use crate::RgbImage;

/// Per-node embedding `(cos h, sin h, s, v, x, y)`.
pub type PixelEmbedding = [f64; 6];

/// RGB in `[0, 1]` to `(h, s, v)` with `h` in radians.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h * std::f64::consts::FRAC_PI_3, s, max)
}

/// Mean RGB of the image resampled onto an `h x w` grid, channels in `[0, 1]`.
///
/// Integer downscales average whole blocks; other sizes sample bilinearly.
fn resample(image: &RgbImage, h: usize, w: usize) -> Vec<[f64; 3]> {
    let (iw, ih) = (image.width() as usize, image.height() as usize);
    let px = |x: usize, y: usize, c: usize| image.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
    if ih % h == 0 && iw % w == 0 {
        let (fy, fx) = (ih / h, iw / w);
        let n = (fy * fx) as f64;
        return (0..h * w)
            .map(|i| {
                let (gy, gx) = (i / w, i % w);
                let mut acc = [0.0; 3];
                for y in gy * fy..(gy + 1) * fy {
                    for x in gx * fx..(gx + 1) * fx {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += px(x, y, c);
                        }
                    }
                }
                acc.map(|a| a / n)
            })
            .collect();
    }
    let tap = |o: usize, src: usize, dst: usize| {
        let pos = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        (i0, (i0 + 1).min(src - 1), pos - i0 as f64)
    };
    (0..h * w)
        .map(|i| {
            let (y0, y1, fy) = tap(i / w, ih, h);
            let (x0, x1, fx) = tap(i % w, iw, w);
            [0, 1, 2].map(|c| {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bot = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                top * (1.0 - fy) + bot * fy
            })
        })
        .collect()
}

/// HSV-plus-position embedding of `image` on an `h x w` grid, row-major.
pub fn hsv_embed(image: &RgbImage, h: usize, w: usize) -> Vec<PixelEmbedding> {
    let rgb = resample(image, h, w);
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    rgb.iter()
        .enumerate()
        .map(|(i, &[r, g, b])| {
            let (hue, s, v) = rgb_to_hsv(r, g, b);
            [hue.cos(), hue.sin(), s, v, norm(i % w, w), norm(i / w, h)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Hue by the piecewise definition in degrees.
    fn hsv_oracle(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
        let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let c = max - min;
        let mut deg = if c == 0.0 {
            0.0
        } else if max == r {
            60.0 * ((g - b) / c)
        } else if max == g {
            60.0 * ((b - r) / c + 2.0)
        } else {
            60.0 * ((r - g) / c + 4.0)
        };
        if deg < 0.0 {
            deg += 360.0;
        }
        (deg.to_radians(), if max == 0.0 { 0.0 } else { c / max }, max)
    }

    #[test]
    fn red_and_gray_pixels() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { Rgb([255, 0, 0]) } else { Rgb([90, 90, 90]) });
        let e = hsv_embed(&img, 1, 2);
        assert_eq!(&e[0][..4], &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!((e[0][4], e[1][4]), (0.0, 1.0));
        assert!((e[1][0].powi(2) + e[1][1].powi(2) - 1.0).abs() < 1e-12);
        assert_eq!(e[1][2], 0.0);
    }

    #[test]
    fn matches_scalar_oracle_at_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = RgbImage::from_fn(7, 5, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let e = hsv_embed(&img, 5, 7);
        for (i, x) in e.iter().enumerate() {
            let p = img.get_pixel((i % 7) as u32, (i / 7) as u32);
            let (h, s, v) = hsv_oracle(p[0], p[1], p[2]);
            assert!((x[0] - h.cos()).abs() < 1e-9 && (x[1] - h.sin()).abs() < 1e-9);
            assert!((x[2] - s).abs() < 1e-12 && (x[3] - v).abs() < 1e-12);
            assert!((x[0] * x[0] + x[1] * x[1] - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&x[4]) && (0.0..=1.0).contains(&x[5]));
        }
    }

    #[test]
    fn block_downsampling_averages() {
        let img = RgbImage::from_fn(4, 4, |x, _| if x < 2 { Rgb([0, 0, 200]) } else { Rgb([0, 0, 100]) });
        let e = hsv_embed(&img, 2, 2);
        assert!((e[0][3] - 200.0 / 255.0).abs() < 1e-12);
        assert!((e[1][3] - 100.0 / 255.0).abs() < 1e-12);
    }
}
