//! The CTR network with source-aware normalization, disentangled
//! representations, adversarial alignment and decorrelation.

mod batch;
mod check;
mod config;
mod network;
mod train;

pub use batch::Batch;
pub use check::{check_objective_gradients, surrogate_objective};
pub use config::{CheckpointHeader, ModelConfig, Vocab};
pub use network::{
    alignment_loss, backbone, combine_losses, decorrelation_loss, discriminator, embed_and_aggregate, forward, init_params, predict,
    project, row_groups, sabn, total_loss, update_running_stats, BnBatchStats, Forward, Losses, Mode, SOURCES,
};
pub use train::{
    batch_ranges, export_representations, load_checkpoint, predict_samples, recompute_bn_statistics, representations, save_checkpoint, train, CurvePoint, LrSchedule,
    Representations, StepRecord, TrainConfig, TrainOutcome,
};
