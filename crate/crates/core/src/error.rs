//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A numeric invariant was violated (NaN/Inf, divergent loss, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The tape or another stateful object was used out of order.
    #[error("state error: {0}")]
    State(String),

    /// Model spec text failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A structurally valid spec violates a model invariant.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A baseline cannot be split into feature extractor and head.
    #[error("split error: {0}")]
    Split(String),

    /// Decoder synthesis failed for the given encoder/target shapes.
    #[error("synthesis error: {0}")]
    Synthesis(String),

    /// Dataset files are malformed or inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file is corrupt, truncated, or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The checkpointed model spec does not match the expected one.
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    /// Clustering preconditions violated (k > N, missing assignment, ...).
    #[error("clustering error: {0}")]
    Clustering(String),

    /// Entropy scoring or representative selection failed.
    #[error("entropy error: {0}")]
    Entropy(String),

    /// A pipeline stage was invoked before its prerequisites exist.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    /// Evaluation over an empty set or similar degenerate request.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
