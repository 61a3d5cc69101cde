use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AstraError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("embedding dimension mismatch for model {model_id}: expected {expected}, found {found}")]
    DimensionMismatch { model_id: usize, expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing {0}")]
    Missing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AstraError {
    /// Validation failures are caller mistakes; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            AstraError::InvalidInput(_)
                | AstraError::DimensionMismatch { .. }
                | AstraError::Shape(_)
                | AstraError::Missing(_)
                | AstraError::Config(_)
        )
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        AstraError::InvalidInput(msg.into())
    }
}

pub type Result<T, E = AstraError> = std::result::Result<T, E>;
