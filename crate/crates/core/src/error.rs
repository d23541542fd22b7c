use std::path::PathBuf;

use crate::bench::BenchError;
use crate::dataio::DataError;
use crate::metrics::MetricsError;
use crate::models::{ModelError, WeightFileError};
use crate::tensor::TensorError;
use crate::train::TrainError;

/// Any failure surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    WeightFile(#[from] WeightFileError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a failure
    /// while running a valid request.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Tensor(_) | Error::Model(_) | Error::Metrics(_) => true,
            Error::Train(e) => e.is_validation(),
            Error::Bench(_) => true,
            Error::Data(e) => e.is_validation(),
            Error::WeightFile(_) | Error::Io { .. } | Error::Json(_) => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
