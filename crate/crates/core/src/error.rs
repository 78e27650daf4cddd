use std::path::PathBuf;

use thiserror::Error;

use crate::harness::featfile::FeatureFileError;

#[derive(Debug, Error)]
pub enum FianError {
    #[error(transparent)]
    Numerics(#[from] fian_numerics::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    FeatureFile { path: PathBuf, source: FeatureFileError },
    #[error("{path}:{line}: {message}")]
    Annotation { path: PathBuf, line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {component} at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, component: String, detail: String },
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradientCheck(Vec<String>),
}

impl FianError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// True for failures caused by arithmetic (NaN/Inf), as opposed to bad
    /// input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFinite { .. } | Self::GradientCheck(_) | Self::Numerics(fian_numerics::Error::NonFinite { .. }))
    }
}

pub type Result<T, E = FianError> = std::result::Result<T, E>;
