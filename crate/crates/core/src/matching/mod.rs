//! Cross- and self-matching networks built on center-pivot 4D convolutions.

mod checkpoint;
mod net;
mod params;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{
    branch_forward, center_pivot_conv4d, context_decoder, forward_from_pyramid, forward_full, loss_aux, loss_main,
    merge_heads, squeeze_encoder, CenterPivotKernel, FullOutput, Phase, ProbMaskPair,
};
pub use params::{averaging_merge, selector_merge, BranchMode, MatchingConfig, MatchingParams, ParamSet};
pub use train::{
    check_full_loss_gradient, episode_loss, episode_loss_grad, train_from, train_toy, FullLoss, FullLossFn, SgdConfig, TrainEpisode, TrainReport,
};
