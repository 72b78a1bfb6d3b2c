//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("scene generation failed for seed {seed}: {reason}")]
    SceneGeneration { seed: u64, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("branch {0} requires token set {1}, which was not provided")]
    MissingTokens(String, String),

    #[error(
        "branch {0} received a missing-modality token set; select a single-modality mode instead"
    )]
    MissingModality(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("checkpoint schema version {got} is not supported (expected {expected})")]
    CheckpointVersion { got: u32, expected: u32 },

    #[error("checkpoint payload truncated while reading tensor '{key}'")]
    CheckpointTruncated { key: String },

    #[error("checkpoint is missing tensor '{0}'")]
    CheckpointMissingTensor(String),

    #[error("dataset schema version {got} is not supported (expected {expected})")]
    DatasetVersion { got: u32, expected: u32 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown {what}: {value}")]
    Unknown { what: String, value: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
