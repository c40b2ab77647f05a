//! Crate-wide error type.
//!
//! Variants are grouped by what the caller did wrong (invalid inputs,
//! mismatched shapes) versus what the run did wrong (divergence, missing
//! coverage, I/O). The CLI maps the former to exit code 1 and the latter to
//! exit code 2.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vocabulary mismatch: expected {expected}, got {got}")]
    VocabMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("row {row} is not a probability distribution: {detail}")]
    BadRow { row: usize, detail: String },

    #[error("could not synthesize a row of the requested entropy class: {0}")]
    RowSynthesis(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },

    #[error("evaluation set leaves row {row} unprobed")]
    UncoveredRow { row: usize },

    #[error("soft labels required when alpha > 0")]
    MissingSoftLabels,

    #[error("label cache mismatch: {0}")]
    LabelCache(String),

    #[error("pass@k estimator: {0}")]
    PassK(String),

    #[error("artifact {path} failed integrity check: {detail}")]
    Integrity { path: PathBuf, detail: String },

    #[error("malformed artifact {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("stage {stage} failed: {detail}")]
    Stage { stage: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that mean the inputs were bad rather than the run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::VocabMismatch { .. }
                | Error::ShapeMismatch(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
