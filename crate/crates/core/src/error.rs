use std::path::PathBuf;

use thiserror::Error;

use crate::diffmath::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension { context: &'static str, expected: usize, actual: usize },
    #[error("product of experts needs at least one expert")]
    NoExperts,
    #[error("modality `{0}` is required but absent")]
    MissingModality(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
