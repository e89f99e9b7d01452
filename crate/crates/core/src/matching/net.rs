//! Forward passes of the matching branches and the merge head.

use super::params::{Bound, BoundParams, MatchingConfig, MatchingParams, ParamSet};
use crate::correlation::{build_pyramid, self_correlation, HypercorrelationPyramid};
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::mask::MaskMap;
use crate::tensor::ops::{self, PROB_FLOOR};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Query-side and support-side 2D kernels of a center-pivot 4D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterPivotKernel {
    /// `Cout x Cin x kh x kw` applied over the query axes.
    pub query: Tensor<f32>,
    /// `Cout x Cin x kh x kw` applied over the support axes.
    pub support: Tensor<f32>,
    pub bias: Option<Tensor<f32>>,
    /// Stride over the support axes. The query axes always use stride 1.
    pub support_stride: usize,
}

/// Applies `k` to a `Cin x Hq x Wq x Hs x Ws` block.
pub fn center_pivot_conv4d(x: &Tensor<f32>, k: &CenterPivotKernel) -> Result<Tensor<f32>> {
    ops::center_pivot(x, &k.query, &k.support, k.bias.as_ref(), k.support_stride)
}

/// Two-channel probabilities with their per-pixel argmax mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaskPair {
    pub probs: Tensor<f32>,
    pub mask: MaskMap,
}

impl ProbMaskPair {
    /// Channel 1 is foreground. Ties go to background.
    pub fn from_probs(probs: Tensor<f32>) -> Result<Self> {
        if probs.ndim() != 3 || probs.shape()[0] != 2 {
            return Err(Error::InvalidShape {
                shape: probs.shape().to_vec(),
                reason: "expected 2 x H x W probabilities".into(),
            });
        }
        let (h, w) = (probs.shape()[1], probs.shape()[2]);
        let hw = h * w;
        let d = probs.data();
        let mask = MaskMap::new(h, w, (0..hw).map(|i| d[hw + i] > d[i]).collect())?;
        Ok(Self { probs, mask })
    }

    pub fn foreground(&self) -> &[f32] {
        let hw = self.mask.height() * self.mask.width();
        &self.probs.data()[hw..]
    }

    pub fn mean_foreground(&self) -> f64 {
        let fg = self.foreground();
        fg.iter().map(|&v| v as f64).sum::<f64>() / fg.len() as f64
    }
}

fn cp_block<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let y = tape.center_pivot(
        x,
        p.get(&format!("{name}.wq"))?,
        p.get(&format!("{name}.ws"))?,
        Some(p.get(&format!("{name}.bias"))?),
        stride,
    )?;
    let y = tape.group_norm(y, p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?, groups)?;
    tape.relu(y)
}

/// Squeezes one pyramid layer's support axes down to `h_eps`.
fn encode_layer<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &MatchingConfig, layer: usize, x: Var) -> Result<Var> {
    let mut y = x;
    for b in 0..2 {
        let s = tape.value(y).shape();
        let stride = if s[3].max(s[4]) > cfg.h_eps { 2 } else { 1 };
        y = cp_block(tape, p, &format!("enc{layer}.{b}"), y, stride, cfg.gn_groups)?;
    }
    let s = tape.value(y).shape().to_vec();
    let (ty, tx) = (s[3].min(cfg.h_eps), s[4].min(cfg.h_eps));
    if (s[3], s[4]) != (ty, tx) {
        if s[3] % ty != 0 || s[4] % tx != 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("support axes cannot be pooled to {ty}x{tx}"),
            });
        }
        y = tape.pool_support(y, s[3] / ty, s[4] / tx)?;
    }
    Ok(y)
}

/// Encoder on a recorded pyramid: returns `Z` of shape `z_channels x H1 x W1`.
fn encode<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &MatchingConfig, pyramid: &[Var]) -> Result<Var> {
    if pyramid.len() != cfg.layers() || pyramid.is_empty() {
        return Err(Error::GroupingMismatch(format!(
            "pyramid has {} layers, network expects {}",
            pyramid.len(),
            cfg.layers()
        )));
    }
    let encoded = pyramid
        .iter()
        .enumerate()
        .map(|(l, &x)| encode_layer(tape, p, cfg, l, x))
        .collect::<Result<Vec<_>>>()?;
    let mut e = *encoded.last().expect("nonempty");
    if encoded.len() == 1 {
        e = cp_block(tape, p, "mix0", e, 1, cfg.gn_groups)?;
    }
    for l in (0..encoded.len().saturating_sub(1)).rev() {
        let target = tape.value(encoded[l]).shape().to_vec();
        let cur = tape.value(e).shape().to_vec();
        if cur[3..] != target[3..] {
            return Err(Error::ShapeMismatch {
                expected: target,
                got: cur,
            });
        }
        let up = if cur[1..3] == target[1..3] {
            e
        } else {
            tape.resize(e, target[1], target[2])?
        };
        let sum = tape.add(encoded[l], up)?;
        e = cp_block(tape, p, &format!("mix{l}"), sum, 1, cfg.gn_groups)?;
    }
    let pooled = tape.mean_trailing(e, 3)?;
    let z = tape.conv2d(pooled, p.get("squeeze.w")?, Some(p.get("squeeze.b")?), 1, 0)?;
    tape.relu(z)
}

/// Decoder: two-channel probabilities at `out_h x out_w`.
fn decode<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &MatchingConfig, z: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let pad = cfg.kernel / 2;
    let x = tape.conv2d(z, p.get("dec0.w")?, Some(p.get("dec0.b")?), 1, pad)?;
    let x = tape.relu(x)?;
    let s = tape.value(x).shape().to_vec();
    let x = tape.resize(x, 2 * s[1], 2 * s[2])?;
    let x = tape.conv2d(x, p.get("dec1.w")?, Some(p.get("dec1.b")?), 1, pad)?;
    let x = tape.relu(x)?;
    let x = tape.conv2d(x, p.get("dec2.w")?, Some(p.get("dec2.b")?), 1, pad)?;
    let x = tape.resize(x, out_h, out_w)?;
    tape.softmax_channels(x)
}

/// Records `pyramid` as constants and runs one branch.
pub(crate) fn branch<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &MatchingConfig,
    pyramid: &HypercorrelationPyramid,
    out: (usize, usize),
) -> Result<Var> {
    let vars: Vec<Var> = pyramid.layers().iter().map(|l| tape.constant(l.cast())).collect();
    let z = encode(tape, p, cfg, &vars)?;
    decode(tape, p, cfg, z, out.0, out.1)
}

/// Merge head on recorded branch outputs, concatenated as `[cross, self]`
/// and compared in log-probability space.
pub(crate) fn merge<T: Real>(tape: &mut Tape<T>, m: &Bound, self_probs: Var, cross_probs: Var) -> Result<Var> {
    let floor = T::lit(PROB_FLOOR);
    let lc = tape.log_clamped(cross_probs, floor)?;
    let ls = tape.log_clamped(self_probs, floor)?;
    let cat = tape.concat_channels(lc, ls)?;
    let logits = tape.conv2d(cat, m.get("merge.w")?, Some(m.get("merge.b")?), 1, 0)?;
    tape.softmax_channels(logits)
}

fn bind_set<'a>(tape: &mut Tape<f32>, p: &'a ParamSet) -> Bound<'a> {
    let vars = p.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    Bound::new(p.names(), vars)
}

/// `Z` for one branch's parameters.
pub fn squeeze_encoder(pyramid: &HypercorrelationPyramid, params: &ParamSet, cfg: &MatchingConfig) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let p = bind_set(&mut tape, params);
    let vars: Vec<Var> = pyramid.layers().iter().map(|l| tape.constant(l.clone())).collect();
    let z = encode(&mut tape, &p, cfg, &vars)?;
    Ok(tape.value(z).clone())
}

pub fn context_decoder(
    z: &Tensor<f32>,
    params: &ParamSet,
    cfg: &MatchingConfig,
    out_h: usize,
    out_w: usize,
) -> Result<ProbMaskPair> {
    let mut tape = Tape::new();
    let p = bind_set(&mut tape, params);
    let zv = tape.constant(z.clone());
    let probs = decode(&mut tape, &p, cfg, zv, out_h, out_w)?;
    ProbMaskPair::from_probs(tape.value(probs).clone())
}

pub fn merge_heads(self_probs: &Tensor<f32>, cross_probs: &Tensor<f32>, merge_params: &ParamSet) -> Result<ProbMaskPair> {
    let mut tape = Tape::new();
    let m = bind_set(&mut tape, merge_params);
    let s = tape.constant(self_probs.clone());
    let c = tape.constant(cross_probs.clone());
    let out = merge(&mut tape, &m, s, c)?;
    ProbMaskPair::from_probs(tape.value(out).clone())
}

/// Runs one branch end to end on a pyramid.
pub fn branch_forward(
    pyramid: &HypercorrelationPyramid,
    params: &ParamSet,
    cfg: &MatchingConfig,
    out_h: usize,
    out_w: usize,
) -> Result<ProbMaskPair> {
    let mut tape = Tape::new();
    let p = bind_set(&mut tape, params);
    let probs = branch(&mut tape, &p, cfg, pyramid, (out_h, out_w))?;
    ProbMaskPair::from_probs(tape.value(probs).clone())
}

/// Mean foreground BCE of `probs` against `gt`.
pub fn loss_main(probs: &Tensor<f32>, gt: &MaskMap) -> Result<f64> {
    check_target(probs, gt)?;
    Ok(ops::bce_foreground(&probs.cast::<f64>(), gt.data())?)
}

fn check_target<T: Real>(probs: &Tensor<T>, gt: &MaskMap) -> Result<()> {
    if probs.ndim() != 3 || probs.shape()[1..] != [gt.height(), gt.width()] {
        return Err(Error::ShapeMismatch {
            expected: vec![2, gt.height(), gt.width()],
            got: probs.shape().to_vec(),
        });
    }
    Ok(())
}

/// Whether ground truth may drive the self branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Inference,
}

/// Self-branch BCE when its correlation is masked by the ground truth.
pub fn loss_aux(q: &FeatureStack, gt: &MaskMap, params: &MatchingParams, phase: Phase) -> Result<f64> {
    if phase == Phase::Inference {
        return Err(Error::AuxAtInference);
    }
    let pyr = self_correlation(q, gt)?;
    let out = branch_forward(&pyr, params.self_params(), &params.config, gt.height(), gt.width())?;
    loss_main(&out.probs, gt)
}

/// Outputs of a full one-shot pass.
#[derive(Clone, Debug)]
pub struct FullOutput {
    pub init: ProbMaskPair,
    pub self_match: ProbMaskPair,
    pub merged: ProbMaskPair,
}

/// Cross branch, self branch driven by the cross mask, then the merge head.
pub fn forward_full(q: &FeatureStack, s: &FeatureStack, support_mask: &MaskMap, params: &MatchingParams) -> Result<FullOutput> {
    let (h, w) = support_mask.dims();
    let cross_pyr = build_pyramid(q, s, support_mask)?;
    forward_from_pyramid(q, &cross_pyr, params, (h, w))
}

/// [`forward_full`] from a precomputed cross pyramid.
pub fn forward_from_pyramid(
    q: &FeatureStack,
    cross_pyr: &HypercorrelationPyramid,
    params: &MatchingParams,
    out: (usize, usize),
) -> Result<FullOutput> {
    let init = branch_forward(cross_pyr, &params.cross, &params.config, out.0, out.1)?;
    let self_pyr = self_correlation(q, &init.mask)?;
    let self_match = branch_forward(&self_pyr, params.self_params(), &params.config, out.0, out.1)?;
    let merged = merge_heads(&self_match.probs, &init.probs, &params.merge)?;
    Ok(FullOutput {
        init,
        self_match,
        merged,
    })
}

/// Training graph of one episode: returns `(total, L_m, L_aux)` vars.
///
/// The cross prediction is thresholded outside the graph before it masks
/// the self correlation, so no gradient reaches it through that path.
/// `frozen_init` replaces that thresholded mask.
pub(crate) fn training_loss<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &MatchingConfig,
    q: &FeatureStack,
    cross_pyr: &HypercorrelationPyramid,
    gt: &MaskMap,
    aux_weight: f64,
    frozen_init: Option<&MaskMap>,
) -> Result<(Var, Var, Var)> {
    let out = gt.dims();
    let cross = branch(tape, &bound.cross, cfg, cross_pyr, out)?;
    let init = match frozen_init {
        Some(m) => m.clone(),
        None => ProbMaskPair::from_probs(tape.value(cross).cast())?.mask,
    };
    let self_pyr = self_correlation(q, &init)?;
    let selfp = branch(tape, bound.self_or_cross(), cfg, &self_pyr, out)?;
    let merged = merge(tape, &bound.merge, selfp, cross)?;
    let lm = tape.bce_foreground(merged, gt.data())?;
    let aux_pyr = self_correlation(q, gt)?;
    let aux = branch(tape, bound.self_or_cross(), cfg, &aux_pyr, out)?;
    let la = tape.bce_foreground(aux, gt.data())?;
    let la_w = tape.scale(la, T::lit(aux_weight))?;
    let total = tape.add(lm, la_w)?;
    Ok((total, lm, la))
}
