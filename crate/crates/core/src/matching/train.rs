use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{branch_forward, training_loss};
use super::params::{BranchMode, MatchingConfig, MatchingParams};
use crate::correlation::{build_pyramid, HypercorrelationPyramid};
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::mask::MaskMap;
use crate::tensor::{gradcheck, GradCheckReport, GradFn, Real, Tape, Tensor, Var};

/// SGD with momentum, decoupled-free weight decay and a polynomial schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Weight of the self-matching loss in the total.
    pub aux_weight: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 9e-4,
            weight_decay: 5e-4,
            momentum: 0.9,
            poly_power: 0.9,
            aux_weight: 1.0,
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, iter: usize, max_iter: usize) -> f64 {
        let frac = iter as f64 / max_iter.max(1) as f64;
        self.lr * (1.0 - frac).max(0.0).powf(self.poly_power)
    }
}

/// One-shot training episode with its cross pyramid precomputed.
#[derive(Clone, Debug)]
pub struct TrainEpisode {
    pub query: FeatureStack,
    pub query_mask: MaskMap,
    pub cross: HypercorrelationPyramid,
}

impl TrainEpisode {
    pub fn new(query: FeatureStack, query_mask: MaskMap, support: &FeatureStack, support_mask: &MaskMap) -> Result<Self> {
        let cross = build_pyramid(&query, support, support_mask)?;
        Ok(Self {
            query,
            query_mask,
            cross,
        })
    }
}

/// Loss terms of one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FullLoss {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
}

/// Loss and gradients of every parameter, in checkpoint order.
pub fn episode_loss_grad(params: &MatchingParams, ep: &TrainEpisode, aux_weight: f64) -> Result<(FullLoss, Vec<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape);
    let vars = bound.flat();
    let (total, lm, la) = training_loss(&mut tape, &bound, &params.config, &ep.query, &ep.cross, &ep.query_mask, aux_weight, None)?;
    let loss = FullLoss {
        total: tape.value(total).data()[0] as f64,
        main: tape.value(lm).data()[0] as f64,
        aux: tape.value(la).data()[0] as f64,
    };
    let mut grads = tape.backward(total)?;
    let flat = params.flat();
    let g = vars
        .iter()
        .zip(flat)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((loss, g))
}

/// Loss without gradients.
pub fn episode_loss(params: &MatchingParams, ep: &TrainEpisode, aux_weight: f64) -> Result<FullLoss> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = params.flat().into_iter().map(|t| tape.constant(t.clone())).collect();
    let bound = params.bind_vars(&vars);
    let (total, lm, la) = training_loss(&mut tape, &bound, &params.config, &ep.query, &ep.cross, &ep.query_mask, aux_weight, None)?;
    Ok(FullLoss {
        total: tape.value(total).data()[0] as f64,
        main: tape.value(lm).data()[0] as f64,
        aux: tape.value(la).data()[0] as f64,
    })
}

/// The total training loss as a function of every parameter tensor.
///
/// The thresholded cross mask that drives the self branch is detached in
/// training, so here it is frozen at its value under `params`.
pub struct FullLossFn<'a> {
    pub params: &'a MatchingParams,
    pub episode: &'a TrainEpisode,
    pub aux_weight: f64,
    init_mask: MaskMap,
}

impl<'a> FullLossFn<'a> {
    pub fn new(params: &'a MatchingParams, episode: &'a TrainEpisode, aux_weight: f64) -> Result<Self> {
        let (h, w) = episode.query_mask.dims();
        let init = branch_forward(&episode.cross, &params.cross, &params.config, h, w)?;
        Ok(Self {
            params,
            episode,
            aux_weight,
            init_mask: init.mask,
        })
    }
}

impl GradFn for FullLossFn<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let bound = self.params.bind_vars(inputs);
        let ep = self.episode;
        let cfg = &self.params.config;
        let (total, _, _) = training_loss(
            tape,
            &bound,
            cfg,
            &ep.query,
            &ep.cross,
            &ep.query_mask,
            self.aux_weight,
            Some(&self.init_mask),
        )?;
        Ok(total)
    }
}

impl TrainEpisode {
    /// Random features on a `grid x grid` finest level halving per level,
    /// three channels each, with diagonal and half-plane masks.
    pub fn random(seed: u64, grid: usize, layers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = || {
            let levels = (0..layers)
                .map(|l| {
                    let g = (grid >> l).max(1);
                    Tensor::from_fn([3, g, g], |_| rng.random_range(-1.0f32..1.0))
                })
                .collect();
            FeatureStack::with_inferred_groups("x", levels).expect("distinct sizes")
        };
        let (q, s) = (stack(), stack());
        let hw = 2 * grid;
        let qm = MaskMap::from_fn(hw, hw, |y, x| y + x < hw);
        let sm = MaskMap::from_fn(hw, hw, |y, _| y < hw / 2);
        Self::new(q, qm, &s, &sm).expect("consistent shapes")
    }
}

/// Central-difference check of the full loss `L_m + L_aux` with respect to
/// every parameter, on a random tiny network of `layers` pyramid layers.
///
/// Freshly initialised biases are zero, so whole feature maps sit exactly on
/// ReLU kinks. Every parameter is jittered first to check at a generic point.
pub fn check_full_loss_gradient(seed: u64, layers: usize, mode: BranchMode) -> Result<GradCheckReport> {
    let mut params = MatchingParams::init(MatchingConfig::tiny(layers), mode, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    for set in params.groups_mut() {
        for t in set.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1f32..0.1));
        }
    }
    // The coarsest level must keep at least 2x2 cells.
    let grid = 4usize.max(1 << layers);
    let ep = TrainEpisode::random(seed.wrapping_add(1), grid, layers);
    let f = FullLossFn::new(&params, &ep, 1.0)?;
    let inputs: Vec<Tensor<f32>> = params.flat().into_iter().cloned().collect();
    // Many ReLU kinks lie within a 1e-3 step of a full forward pass.
    gradcheck(&f, &inputs, 1e-5, 6)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: MatchingParams,
    /// Mean total loss of the initial parameters over the training set.
    pub initial_loss: f64,
    /// Mean total loss of the returned parameters over the training set.
    pub final_loss: f64,
    /// Mean running loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

fn mean_loss(params: &MatchingParams, episodes: &[TrainEpisode], aux_weight: f64) -> Result<f64> {
    let mut sum = 0.0;
    for ep in episodes {
        sum += episode_loss(params, ep, aux_weight)?.total;
    }
    Ok(sum / episodes.len() as f64)
}

/// Trains from seeded initial parameters, one episode per step.
pub fn train_toy(
    episodes: &[TrainEpisode],
    config: MatchingConfig,
    mode: BranchMode,
    epochs: usize,
    seed: u64,
    sgd: &SgdConfig,
) -> Result<TrainReport> {
    let init = MatchingParams::init(config, mode, seed);
    train_from(init, episodes, epochs, seed, sgd)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: MatchingParams,
    episodes: &[TrainEpisode],
    epochs: usize,
    seed: u64,
    sgd: &SgdConfig,
) -> Result<TrainReport> {
    if episodes.is_empty() {
        return Err(Error::Config("no training episodes".into()));
    }
    let initial_loss = mean_loss(&params, episodes, sgd.aux_weight)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut velocity: Vec<Vec<f32>> = params.flat().iter().map(|t| vec![0.0; t.len()]).collect();
    let max_iter = epochs * episodes.len();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut iter = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for &e in &order {
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                episode: e,
                loss,
            };
            let (loss, grads) = match episode_loss_grad(&params, &episodes[e], sgd.aux_weight) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(err) => return Err(err),
            };
            if !loss.total.is_finite() {
                return Err(diverged(loss.total));
            }
            running += loss.total;
            let lr = sgd.lr_at(iter, max_iter) as f32;
            let (wd, mom) = (sgd.weight_decay as f32, sgd.momentum as f32);
            let tensors = params.groups_mut().into_iter().flat_map(|g| g.tensors_mut().iter_mut());
            for ((t, g), v) in tensors.zip(&grads).zip(&mut velocity) {
                for ((p, &gi), vi) in t.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    let d = gi + wd * *p;
                    *vi = if iter == 0 { d } else { mom * *vi + d };
                    *p -= lr * *vi;
                }
            }
            iter += 1;
        }
        epoch_losses.push(running / episodes.len() as f64);
    }
    let final_loss = mean_loss(&params, episodes, sgd.aux_weight)?;
    Ok(TrainReport {
        params,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_loss_gradient_matches_central_difference() {
        for mode in [BranchMode::TwoBranch, BranchMode::Shared] {
            let rep = check_full_loss_gradient(3, 2, mode).unwrap();
            assert!(rep.passed(1e-3), "{rep:?}");
        }
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let cfg = MatchingConfig::tiny(2);
        let eps = vec![TrainEpisode::random(1, 4, 2), TrainEpisode::random(2, 4, 2)];
        let sgd = SgdConfig {
            lr: 0.0,
            ..SgdConfig::default()
        };
        let rep = train_toy(&eps, cfg.clone(), BranchMode::TwoBranch, 2, 5, &sgd).unwrap();
        assert_eq!(rep.params, MatchingParams::init(cfg, BranchMode::TwoBranch, 5));
        assert_eq!(rep.epoch_losses.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = MatchingConfig::tiny(2);
        let eps = vec![TrainEpisode::random(1, 4, 2), TrainEpisode::random(2, 4, 2)];
        let sgd = SgdConfig {
            lr: 1e-2,
            ..SgdConfig::default()
        };
        let a = train_toy(&eps, cfg.clone(), BranchMode::Shared, 3, 5, &sgd).unwrap();
        let b = train_toy(&eps, cfg, BranchMode::Shared, 3, 5, &sgd).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = MatchingConfig::tiny(2);
        let eps = vec![TrainEpisode::random(1, 4, 2)];
        let sgd = SgdConfig {
            lr: 1e30,
            momentum: 0.0,
            ..SgdConfig::default()
        };
        let r = train_toy(&eps, cfg, BranchMode::TwoBranch, 5, 5, &sgd);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn poly_schedule() {
        let s = SgdConfig::default();
        assert_eq!(s.lr_at(0, 10), 9e-4);
        assert!((s.lr_at(5, 10) - 9e-4 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(s.lr_at(10, 10), 0.0);
        assert_eq!((s.weight_decay, s.momentum, s.aux_weight), (5e-4, 0.9, 1.0));
    }
}
