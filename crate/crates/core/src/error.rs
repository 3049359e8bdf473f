use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dataset container failures, kept distinct so callers can tell a missing
/// file from a corrupt one.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("dataset file {} not found", .0.display())]
    Missing(PathBuf),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("non-finite value in sample {sample}")]
    NonFinite { sample: usize },
}
