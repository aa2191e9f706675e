//! Minimal reverse-mode automatic differentiation used to train the
//! networks in this crate.

pub mod checkpoint;
pub mod gradcheck;
mod nn;
pub mod optim;
pub mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Adam, AdamConfig, AdamState, CosineSchedule, NonFinitePolicy, StepOutcome, TrainConfig};
pub use params::{ParamId, ParamSet};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, Tape, Var};
pub use tensor::Tensor;
