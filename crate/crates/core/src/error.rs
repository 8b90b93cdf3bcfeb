//! Error types shared across the testbed.
//!
//! Errors are grouped by what the caller can do about them: configuration
//! problems (fix the config and retry), data problems (fix the input files),
//! and runtime problems (bugs or violated call contracts). The CLI maps each
//! group to a distinct exit code.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad ratios, zero counts, out-of-range knobs).
    #[error("config error: {0}")]
    Config(String),

    /// A JSONL record could not be parsed. Reports the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Filtering or loading produced a dataset with nothing left in it.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Tensor or token-window shape does not match what the operation expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// Unknown user, item, or token id.
    #[error("index error: {0}")]
    Index(String),

    /// Attempt to update parameters of a frozen model.
    #[error("frozen model: {0}")]
    Frozen(String),

    /// An operation that needs text received an empty (or all-padding) token sequence.
    #[error("empty text: {0}")]
    EmptyText(String),

    /// A numeric argument fell outside its documented range.
    #[error("range error: {0}")]
    Range(String),

    /// Operation applied to the wrong recommender family.
    #[error("family mismatch: {0}")]
    Family(String),

    /// Text generation failed. Carries a short hash of the offending prompt
    /// so failures can be correlated with exported prompt files.
    #[error("generation failed (prompt {prompt_hash}): {msg}")]
    Generation { prompt_hash: String, msg: String },

    /// A pipeline stage needs an artifact that a previous stage did not produce.
    #[error("missing or invalid artifact: {0}")]
    Artifact(String),

    /// A call-contract violation that indicates a bug in the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code group for the CLI: 2 = configuration, 3 = data, 4 = runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) => 2,
            Error::Parse { .. } | Error::EmptyDataset(_) | Error::Artifact(_) | Error::Io(_) => 3,
            _ => 4,
        }
    }
}
