//! Pretraining loop: AdamW with warmup and linear decay, global-norm clipping,
//! a CSV loss log and rotated checkpoints that can be resumed exactly.

mod config;
mod log;
mod optim;
mod train;

pub use config::{RunConfig, TrainConfig};
pub use log::{read_loss_log, LossLog, LossLogRow, LOSS_LOG_HEADER};
pub use optim::{clip_gradients, lr_at, AdamW};
pub use train::{
    checkpoint_path, list_checkpoints, stream_seed, train, TrainOptions, TrainOutcome,
    LOSS_LOG_FILE,
};

use crate::model::ModelError;
use crate::sampler::SamplerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad value {value:?} for key {key}")]
    BadValue { key: String, value: String },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate config key {0}")]
    DuplicateKey(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("non-finite gradient in parameter {0}")]
    NanGradient(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint {path}: {message}")]
    CheckpointIo { path: String, message: String },
    #[error("loss log {path}: {message}")]
    Log { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}
