//! Corpora, fold splits, episodic sampling and mIoU evaluation.

mod config;
mod corpus;
mod episode;
mod eval;
mod folds;
mod synthetic;
mod train;

pub use config::RunConfig;
pub use corpus::{load_dataset, toy_corpus, Corpus, Sample, ToyCorpusConfig};
pub use episode::{sample_episode, Episode};
pub use eval::{
    evaluate, run_episode, ClassStats, EpisodeResult, EvalConfig, EvalReport, FeatureBank, FewShotModel, Head,
    MatchingModel, ShotInput,
};
pub use folds::{Dataset, FoldSpec, DLRSD_CLASSES, ISAID_CLASSES, TOY_CLASSES};
pub use synthetic::{two_blob_fixture, TwoBlobFixture};
pub use train::{train_episodes, train_on_fold, ToyTrainConfig};
