//! Fusing matched masks with eigensegments, and K-shot voting.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::MaskMap;
use crate::spectral::Eigensegment;

/// Default K-shot vote threshold.
pub const DEFAULT_TAU: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum FusionMode {
    #[default]
    None,
    /// OR with the first non-constant eigensegment.
    E1,
    /// OR with the eigensegment closest to the ground truth. Oracle.
    EBest,
}

impl FusionMode {
    pub fn is_oracle(self) -> bool {
        self == FusionMode::EBest
    }

    pub fn uses_eigensegments(self) -> bool {
        self != FusionMode::None
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::E1 => "e1",
            FusionMode::EBest => "ebest",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "e1" => Ok(FusionMode::E1),
            "ebest" | "e_best" => Ok(FusionMode::EBest),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub kshot_tau: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::None,
            kshot_tau: DEFAULT_TAU,
        }
    }
}

impl FusionConfig {
    pub fn new(mode: FusionMode, kshot_tau: f64) -> Result<Self> {
        if !(kshot_tau > 0.0 && kshot_tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1], got {kshot_tau}")));
        }
        Ok(Self { mode, kshot_tau })
    }
}

/// Pixelwise OR of a matched mask and an eigensegment mask.
pub fn fuse_or(matched: &MaskMap, segment: &MaskMap) -> Result<MaskMap> {
    matched.or(segment)
}

/// `TP / (TP + FP + FN)`, with two empty masks scoring 1.
pub fn iou(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    pred.same_size(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// The eigensegment with index 1, if computed.
pub fn first_eigensegment(segs: &[Eigensegment]) -> Option<&Eigensegment> {
    segs.iter().find(|s| s.index == 1)
}

/// Highest-IoU eigensegment against `gt`; ties go to the lowest index.
pub fn select_best_eigensegment<'a>(segs: &'a [Eigensegment], gt: &MaskMap) -> Result<&'a Eigensegment> {
    let mut best: Option<(&Eigensegment, f64)> = None;
    for s in segs {
        let v = iou(&s.mask, gt)?;
        let better = match best {
            None => true,
            Some((b, bv)) => v > bv || (v == bv && s.index < b.index),
        };
        if better {
            best = Some((s, v));
        }
    }
    best.map(|(s, _)| s).ok_or(Error::EmptyCandidates)
}

/// `matched | E_1`; without eigensegments the matched mask is returned.
pub fn fuse_e1(matched: &MaskMap, segs: &[Eigensegment]) -> Result<MaskMap> {
    match first_eigensegment(segs) {
        Some(s) => fuse_or(matched, &s.mask),
        None => Ok(matched.clone()),
    }
}

/// `matched | E_best` using the query ground truth.
pub fn fuse_e_best(matched: &MaskMap, segs: &[Eigensegment], gt: &MaskMap) -> Result<MaskMap> {
    fuse_or(matched, &select_best_eigensegment(segs, gt)?.mask)
}

/// Sums `K` binary predictions, divides by the maximum vote and keeps
/// pixels whose score is strictly above `tau`.
pub fn kshot_vote(preds: &[MaskMap], tau: f64) -> Result<MaskMap> {
    let first = preds.first().ok_or(Error::EmptyCandidates)?;
    let (h, w) = first.dims();
    let mut votes = vec![0u32; h * w];
    for p in preds {
        first.same_size(p)?;
        for (v, &b) in votes.iter_mut().zip(p.data()) {
            *v += b as u32;
        }
    }
    let max = votes.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Ok(MaskMap::zeros(h, w));
    }
    MaskMap::new(h, w, votes.iter().map(|&v| v as f64 / max as f64 > tau).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> MaskMap {
        MaskMap::from_fn(h, w, |_, _| rng.random_bool(p))
    }

    fn seg(index: usize, mask: MaskMap) -> Eigensegment {
        let (h, w) = mask.dims();
        Eigensegment {
            index,
            eigenvalue: 0.0,
            soft: Tensor::zeros([h, w]),
            otsu: mask.clone(),
            adaptive: mask.clone(),
            mask,
        }
    }

    #[test]
    fn or_with_constant_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, 6, 7, 0.3);
        assert_eq!(fuse_or(&m, &MaskMap::zeros(6, 7)).unwrap(), m);
        assert_eq!(fuse_or(&m, &MaskMap::ones(6, 7)).unwrap(), MaskMap::ones(6, 7));
        assert!(fuse_or(&m, &MaskMap::zeros(7, 6)).is_err());
    }

    #[test]
    fn iou_examples() {
        let gt = MaskMap::from_fn(10, 10, |y, _| y < 5);
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(iou(&MaskMap::from_fn(10, 10, |y, _| y >= 5), &gt).unwrap(), 0.0);
        assert_eq!(iou(&MaskMap::from_fn(10, 10, |y, x| y < 5 && x < 5), &gt).unwrap(), 0.5);
        assert_eq!(iou(&MaskMap::zeros(3, 3), &MaskMap::zeros(3, 3)).unwrap(), 1.0);
        assert!(iou(&gt, &MaskMap::zeros(3, 3)).is_err());
    }

    #[test]
    fn best_segment_selection() {
        let gt = MaskMap::from_fn(8, 8, |y, _| y < 4);
        let disjoint = seg(1, MaskMap::from_fn(8, 8, |y, _| y >= 4));
        assert_eq!(select_best_eigensegment(std::slice::from_ref(&disjoint), &gt).unwrap().index, 1);
        let segs = vec![disjoint, seg(2, gt.clone())];
        assert_eq!(select_best_eigensegment(&segs, &gt).unwrap().index, 2);
        let ties = vec![seg(3, gt.clone()), seg(2, gt.clone())];
        assert_eq!(select_best_eigensegment(&ties, &gt).unwrap().index, 2);
        assert!(matches!(select_best_eigensegment(&[], &gt), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn best_segment_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let gt = random_mask(&mut rng, 9, 9, 0.4);
            let segs: Vec<_> = (1..5).map(|i| seg(i, random_mask(&mut rng, 9, 9, 0.4))).collect();
            let mut best = (0, -1.0);
            for s in &segs {
                let mut inter = 0.0;
                let mut union = 0.0;
                for y in 0..9 {
                    for x in 0..9 {
                        let (a, b) = (s.mask.get(y, x), gt.get(y, x));
                        inter += (a && b) as u8 as f64;
                        union += (a || b) as u8 as f64;
                    }
                }
                let v = inter / union;
                if v > best.1 {
                    best = (s.index, v);
                }
            }
            assert_eq!(select_best_eigensegment(&segs, &gt).unwrap().index, best.0);
        }
    }

    #[test]
    fn e1_ignores_other_indices() {
        let m = MaskMap::from_fn(4, 4, |y, x| y == 0 && x == 0);
        let segs = vec![seg(2, MaskMap::ones(4, 4)), seg(1, MaskMap::from_fn(4, 4, |y, _| y == 3))];
        let fused = fuse_e1(&m, &segs).unwrap();
        assert_eq!(fused.count(), 5);
        assert_eq!(fuse_e1(&m, &[]).unwrap(), m);
    }

    #[test]
    fn vote_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&mut rng, 8, 8, 0.5);
        assert_eq!(kshot_vote(std::slice::from_ref(&m), 0.4).unwrap(), m);
        assert_eq!(kshot_vote(&vec![m.clone(); 5], 0.4).unwrap(), m);
        // pixel (0,0) in all five, (0,1) in two of five
        let preds: Vec<MaskMap> = (0..5).map(|k| MaskMap::from_fn(1, 2, |_, x| x == 0 || k < 2)).collect();
        let v = kshot_vote(&preds, 0.4).unwrap();
        assert!(v.get(0, 0) && !v.get(0, 1));
        assert!(kshot_vote(&preds, 0.39).unwrap().get(0, 1));
        assert!(kshot_vote(&vec![MaskMap::zeros(3, 3); 2], 0.4).unwrap().is_empty());
        assert!(kshot_vote(&[], 0.4).is_err());
        assert!(kshot_vote(&[MaskMap::zeros(3, 3), MaskMap::zeros(2, 3)], 0.4).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [FusionMode::None, FusionMode::E1, FusionMode::EBest] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!(FusionMode::EBest.is_oracle() && !FusionMode::E1.is_oracle());
        assert!("best".parse::<FusionMode>().is_err());
        assert!(FusionConfig::new(FusionMode::E1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn or_laws(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_mask(&mut rng, h, w, 0.3), random_mask(&mut rng, h, w, 0.5), random_mask(&mut rng, h, w, 0.2));
            let ab = fuse_or(&a, &b).unwrap();
            prop_assert_eq!(&ab, &fuse_or(&b, &a).unwrap());
            prop_assert_eq!(fuse_or(&a, &a).unwrap(), a.clone());
            prop_assert_eq!(fuse_or(&ab, &c).unwrap(), fuse_or(&a, &fuse_or(&b, &c).unwrap()).unwrap());
            prop_assert!(a.is_subset_of(&ab) && b.is_subset_of(&ab));
            prop_assert!(ab.count() >= a.count().max(b.count()));
        }

        #[test]
        fn vote_is_permutation_invariant_and_monotone(seed in any::<u64>(), t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut preds: Vec<MaskMap> = (0..5).map(|_| random_mask(&mut rng, 6, 6, 0.4)).collect();
            let base = kshot_vote(&preds, t1).unwrap();
            preds.reverse();
            preds.swap(0, 3);
            prop_assert_eq!(&kshot_vote(&preds, t1).unwrap(), &base);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(kshot_vote(&preds, hi).unwrap().is_subset_of(&kshot_vote(&preds, lo).unwrap()));
        }
    }
}
