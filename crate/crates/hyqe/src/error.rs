//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by ranking, providers, caching, and file ingestion.
#[derive(Debug, Error)]
pub enum Error {
    /// Two vectors were combined with different dimensions.
    #[error("embedding dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },

    /// Cosine similarity was requested for a zero-norm vector.
    #[error("cosine similarity undefined for zero-norm vector")]
    ZeroNorm,

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value at position {index} of embedding")]
    NonFinite { index: usize },

    /// A provider call failed after exhausting retries.
    #[error("provider error ({}): {message}", if *.retryable { "retryable" } else { "permanent" })]
    Provider { message: String, retryable: bool },

    /// The prompt plus the output reserve does not fit the generator window.
    #[error("prompt needs ~{needed} tokens but the window is {window}")]
    WindowExceeded { needed: usize, window: usize },

    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A cache record could not be decoded.
    #[error("corrupt cache record for key digest {digest}: {message}")]
    CorruptRecord { digest: String, message: String },

    /// A data file had a malformed line.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// An identifier appeared twice where uniqueness is required.
    #[error("duplicate id {id:?} at {path}:{line}")]
    DuplicateId {
        id: String,
        path: String,
        line: usize,
    },

    /// A run and qrels share no query ids.
    #[error("run and qrels share no query ids")]
    EmptyEvaluation,

    /// Configuration was internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn provider(message: impl Into<String>, retryable: bool) -> Self {
        Error::Provider {
            message: message.into(),
            retryable,
        }
    }

    /// True when retrying the same call may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Provider { retryable: true, .. })
    }
}
