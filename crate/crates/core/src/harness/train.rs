use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use super::episode::sample_episode;
use super::eval::FeatureBank;
use super::folds::FoldSpec;
use crate::error::{Error, Result};
use crate::matching::{train_toy, BranchMode, MatchingConfig, SgdConfig, TrainEpisode, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTrainConfig {
    /// One-shot training episodes, cycled over the fold's train classes.
    pub episodes: usize,
    pub epochs: usize,
    pub seed: u64,
    pub branch: BranchMode,
    pub sgd: SgdConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            epochs: 4,
            seed: 7,
            branch: BranchMode::TwoBranch,
            sgd: SgdConfig::default(),
        }
    }
}

/// Samples one-shot episodes from the train classes of `spec`.
pub fn train_episodes(
    corpus: &Corpus,
    bank: &FeatureBank,
    spec: &FoldSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainEpisode>> {
    let classes: Vec<u8> = spec.train_classes.iter().copied().filter(|&c| !corpus.pool(c).is_empty()).collect();
    if classes.is_empty() {
        return Err(Error::Config("no train class has images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let class_id = classes[i % classes.len()];
            let ep = sample_episode(corpus, class_id, 1, rng.next_u64())?;
            let s = ep.supports[0];
            TrainEpisode::new(
                bank.get(ep.query).clone(),
                ep.query_mask(corpus),
                bank.get(s),
                &corpus.sample(s).class_mask(class_id),
            )
        })
        .collect()
}

/// Trains the matching network on the train classes of `spec`.
pub fn train_on_fold(corpus: &Corpus, bank: &FeatureBank, spec: &FoldSpec, cfg: &ToyTrainConfig) -> Result<TrainReport> {
    let episodes = train_episodes(corpus, bank, spec, cfg.episodes, cfg.seed)?;
    let config = MatchingConfig::new(bank.get(0).groups().iter().map(Vec::len).collect());
    train_toy(&episodes, config, cfg.branch, cfg.epochs, cfg.seed, &cfg.sgd)
}
