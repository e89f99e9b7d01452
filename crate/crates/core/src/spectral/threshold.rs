use crate::error::{Error, Result};
use crate::mask::MaskMap;
use crate::tensor::{expect_rank, Tensor};

pub const OTSU_BINS: usize = 256;
/// Fixed-point scale the adaptive threshold quantises the map range to.
const QUANT: f64 = (1u64 << 24) as f64;

fn dims(map: &Tensor<f64>) -> Result<(usize, usize)> {
    expect_rank(map.shape(), 2, "eigenmap")?;
    Ok((map.shape()[0], map.shape()[1]))
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// 256-bin index of every pixel over the map's own range, `None` for a
/// constant map.
pub fn otsu_bins(map: &[f64]) -> Option<Vec<usize>> {
    let (lo, hi) = range(map);
    if !(hi > lo) {
        return None;
    }
    let scale = OTSU_BINS as f64 / (hi - lo);
    Some(map.iter().map(|&v| (((v - lo) * scale) as usize).min(OTSU_BINS - 1)).collect())
}

/// `sum_k S_k^2 / P_k` over non-empty classes, where `S_k` and `P_k` are the
/// bin-index mass and pixel count of class `k`.
fn between_class(cum_n: &[f64], cum_s: &[f64], cuts: &[usize]) -> f64 {
    let mut lo = 0;
    let mut total = 0.0;
    for &hi in cuts.iter().chain(std::iter::once(&OTSU_BINS)) {
        let p = cum_n[hi] - cum_n[lo];
        if p > 0.0 {
            let s = cum_s[hi] - cum_s[lo];
            total += s * s / p;
        }
        lo = hi;
    }
    total
}

/// Otsu thresholds of a 256-bin histogram: `classes - 1` ascending bin
/// indices, class `k` holding bins `[t_(k-1), t_k)`. Ties between threshold
/// tuples go to the lexicographically lowest.
pub fn otsu_thresholds(hist: &[u64; OTSU_BINS], classes: usize) -> Result<Vec<usize>> {
    if !(2..=3).contains(&classes) {
        return Err(Error::Config(format!("otsu classes must be 2 or 3, got {classes}")));
    }
    let mut cum_n = vec![0.0; OTSU_BINS + 1];
    let mut cum_s = vec![0.0; OTSU_BINS + 1];
    for b in 0..OTSU_BINS {
        cum_n[b + 1] = cum_n[b] + hist[b] as f64;
        cum_s[b + 1] = cum_s[b] + (b as u64 * hist[b]) as f64;
    }
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut consider = |cuts: Vec<usize>| {
        let v = between_class(&cum_n, &cum_s, &cuts);
        if v > best.0 {
            best = (v, cuts);
        }
    };
    if classes == 2 {
        (1..OTSU_BINS).for_each(|t| consider(vec![t]));
    } else {
        for t1 in 1..OTSU_BINS - 1 {
            (t1 + 1..OTSU_BINS).for_each(|t2| consider(vec![t1, t2]));
        }
    }
    Ok(best.1)
}

/// 256-bin histogram of a map over its own range, `None` for a constant map.
pub fn otsu_histogram(map: &[f64]) -> Option<[u64; OTSU_BINS]> {
    let bins = otsu_bins(map)?;
    let mut hist = [0u64; OTSU_BINS];
    bins.iter().for_each(|&b| hist[b] += 1);
    Some(hist)
}

/// Multi-level Otsu on a 256-bin histogram. The mask holds the pixels of
/// the highest non-empty class.
pub fn multi_otsu(map: &Tensor<f64>, classes: usize) -> Result<MaskMap> {
    let (h, w) = dims(map)?;
    let Some(bins) = otsu_bins(map.data()) else {
        if !(2..=3).contains(&classes) {
            return Err(Error::Config(format!("otsu classes must be 2 or 3, got {classes}")));
        }
        return Ok(MaskMap::zeros(h, w));
    };
    let mut hist = [0u64; OTSU_BINS];
    bins.iter().for_each(|&b| hist[b] += 1);
    let cuts = otsu_thresholds(&hist, classes)?;
    let top = bins.iter().copied().max().unwrap_or(0);
    let cut = cuts.iter().rev().copied().find(|&t| t <= top).unwrap_or(0);
    Ok(MaskMap::new(h, w, bins.iter().map(|&b| b >= cut).collect::<Vec<_>>())?)
}

/// Local mean threshold: a pixel is on iff it exceeds the mean of its
/// `block x block` window minus `offset`. Windows replicate edge pixels.
///
/// `offset` is a fraction of the map's value range, so the result does not
/// depend on the scale of the map. The map is quantised to 2^24 levels over
/// its range and window sums are taken from an exact integer integral image.
pub fn adaptive_threshold(map: &Tensor<f64>, block: usize, offset: f64) -> Result<MaskMap> {
    let (h, w) = dims(map)?;
    if block == 0 || block % 2 == 0 {
        return Err(Error::EvenKernel(block, block));
    }
    let (lo, hi) = range(map.data());
    if !(hi > lo) {
        return Ok(MaskMap::zeros(h, w));
    }
    let scale = QUANT / (hi - lo);
    let q: Vec<i64> = map.data().iter().map(|&v| ((v - lo) * scale).round() as i64).collect();
    let c = (offset * QUANT).round() as i64;
    let r = block / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let clamp = |i: usize, n: usize| i.saturating_sub(r).min(n - 1);
    let mut integral = vec![0i64; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let mut row = 0i64;
        for x in 0..pw {
            row += q[clamp(y, h) * w + clamp(x, w)];
            integral[(y + 1) * (pw + 1) + x + 1] = integral[y * (pw + 1) + x + 1] + row;
        }
    }
    let area = (block * block) as i64;
    Ok(MaskMap::from_fn(h, w, |y, x| {
        let at = |yy: usize, xx: usize| integral[yy * (pw + 1) + xx];
        let s = at(y + block, x + block) - at(y, x + block) - at(y + block, x) + at(y, x);
        q[y * w + x] * area > s - c * area
    }))
}
