//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum RankGameError {
    /// Array shapes or table kinds do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A probability table violates nonnegativity or normalization.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// An argument is outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// State-only and state-action tables/rewards were mixed incompatibly.
    #[error("visitation kind mismatch: {0}")]
    KindMismatch(String),

    /// Required auxiliary data (time marginals, online pair, ...) is absent.
    #[error("missing data: {0}")]
    MissingData(String),

    /// A configuration field failed validation.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// JSON (de)serialization failure.
    #[error("serialization error: {0}")]
    Serde(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RankGameError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        RankGameError::Config { field: field.into(), message: message.into() }
    }
}

impl From<serde_json::Error> for RankGameError {
    fn from(e: serde_json::Error) -> Self {
        RankGameError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RankGameError>;
