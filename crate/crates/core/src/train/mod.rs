//! Training: pixel-wise cross-entropy, AdamW, the epoch loop and a
//! finite-difference gradient verifier.

mod adamw;
pub mod gradcheck;
mod loss;
mod trainer;

use std::path::PathBuf;

pub use adamw::{adamw_step, clip_global_norm, AdamWConfig, AdamWState};
pub use gradcheck::{GradCheckConfig, GradCheckReport, GroupReport};
pub use loss::{cross_entropy_loss, LossOutput};
pub use trainer::{
    evaluate, read_log_csv, save_checkpoint, train_epoch, write_log_csv, Checkpoint, EpochLog, TrainConfig,
    Trainer,
};

use crate::dataio::DataError;
use crate::metrics::MetricsError;
use crate::models::{ModelError, WeightFileError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient of {param} contains non-finite values; step rejected")]
    NonFiniteGradient { param: String },
    #[error("gradient for {param} has no matching parameter of that shape")]
    GradientMismatch { param: String },
    #[error("dataset has {dataset} classes but the model predicts {model}")]
    ClassCount { dataset: usize, model: usize },
    #[error("every target pixel carries the ignore label; the loss is undefined")]
    NoPixels,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    WeightFile(#[from] WeightFileError),
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}", path = .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl TrainError {
    /// True when the request itself was invalid, as opposed to a failure
    /// while carrying out a valid one.
    pub fn is_validation(&self) -> bool {
        match self {
            TrainError::InvalidConfig(_)
            | TrainError::ClassCount { .. }
            | TrainError::NoPixels
            | TrainError::Model(_)
            | TrainError::Metrics(_) => true,
            TrainError::Data(e) => e.is_validation(),
            TrainError::NonFiniteGradient { .. }
            | TrainError::GradientMismatch { .. }
            | TrainError::WeightFile(_)
            | TrainError::Io { .. }
            | TrainError::Csv { .. } => false,
        }
    }
}
