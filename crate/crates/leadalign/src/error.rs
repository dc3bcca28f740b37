//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown lead name: {0:?}")]
    UnknownLead(String),

    #[error("record {id:?} has too few samples for this operation ({num_samples})")]
    EmptyRecord { id: String, num_samples: usize },

    #[error("corrupt sample file {path}: expected {expected} bytes, found {actual}")]
    CorruptFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("manifest disagrees with record data: {0}")]
    ManifestMismatch(String),

    #[error("duplicate record id in batch: {0:?}")]
    DuplicateRecord(String),

    #[error("records of mixed length in batch: expected {expected}, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("dataset too small: need at least {needed} records, found {actual}")]
    DatasetTooSmall { needed: usize, actual: usize },

    #[error("embedding batches do not match: {0}")]
    BatchMismatch(String),

    #[error("duplicate record id in embedding batch: {0:?}")]
    DuplicateId(String),

    #[error("dataset is missing the {0:?} split")]
    MissingSplit(String),

    #[error("too few samples: need at least {needed}, found {actual}")]
    TooFewSamples { needed: usize, actual: usize },

    #[error("unknown configuration key: {0:?}")]
    UnknownKey(String),

    #[error("invalid value for {key:?}: {message}")]
    InvalidValue { key: String, message: String },

    #[error("unknown synthetic class: {0:?}")]
    UnknownClass(String),

    #[error("output directory is locked by another run: {0}")]
    OutputDirLocked(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Config(#[from] toml::de::Error),
}
