use std::path::PathBuf;

use bbalpha::diagnostics::DiagnosticsError;
use bbalpha::energy::EnergyError;
use bbalpha::models::{DataError, ModelError};
use bbalpha::optim::TrainError;
use bbalpha::oracle::OracleError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("split {split}, {method}: {source}")]
    Train {
        split: usize,
        method: String,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 configuration, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Usage(_) | Self::Model(_) => EXIT_CONFIG,
            Self::Io { .. } | Self::Format { .. } | Self::Data(_) => EXIT_IO,
            Self::Train { source, .. } => match source {
                TrainError::Config(_) => EXIT_CONFIG,
                TrainError::DivergenceDetected { .. } | TrainError::Energy { .. } => EXIT_DIVERGENCE,
            },
            Self::Energy(_) => EXIT_DIVERGENCE,
            Self::Diagnostics(e) => match e {
                DiagnosticsError::Config(_) => EXIT_CONFIG,
                DiagnosticsError::Energy(_) => EXIT_DIVERGENCE,
                DiagnosticsError::Io(_) => EXIT_IO,
            },
            Self::Oracle(e) => match e {
                OracleError::DomainError { .. }
                | OracleError::ShapeMismatch { .. }
                | OracleError::NonPositiveNoise(_) => EXIT_CONFIG,
                _ => EXIT_DIVERGENCE,
            },
        }
    }
}
