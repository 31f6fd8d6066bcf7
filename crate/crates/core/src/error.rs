use thiserror::Error;

use crate::autodiff::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid structure: {0}")]
    Structure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite:?})")]
    Divergence { epoch: usize, last_finite: Option<usize> },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dataset generation failed at step {step}: {msg}")]
    Generation { step: usize, msg: String },

    #[error("neighbor list: {0}")]
    Neighbors(String),

    #[error("bond detection: {0}")]
    Bonds(String),

    #[error("h(r): {0}")]
    Histogram(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by non-finite or exploding numbers.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Autodiff(_) | Error::Divergence { .. } | Error::Generation { .. } | Error::Eval(_))
    }
}
