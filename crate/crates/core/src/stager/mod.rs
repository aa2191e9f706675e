//! Sleep staging: network, losses, CRF decoding and training.

pub mod crf;
pub mod loss;
pub mod model;
pub mod train;

pub use loss::{
    change_loss, crf_loss, duration_loss, focal_loss, stage_weights, total_loss, DurationConfig, LossComponents,
    LossWeights, STAGES,
};
pub use model::{epoch_features, StagePrediction, StagerConfig, StagerModel, EPOCH_FEATURES};
pub use train::{two_stage_train, StagerSample, StagerTrainConfig, StagerTrainReport};
