use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: referenced file {path:?} does not exist")]
    MissingFile { line: usize, path: PathBuf },

    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("failed to decode {path:?}: {message}")]
    DecodeError { path: PathBuf, message: String },

    #[error("candidate score list is empty")]
    EmptyScores,

    #[error("invalid split ratios {0:?}")]
    BadRatios((f64, f64, f64)),

    #[error("scale {0} is not configured")]
    BadScale(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("expected {expected} inputs, got {got}")]
    WrongCount { expected: usize, got: usize },

    #[error("no precomputed embedding for text {0:?}")]
    MissingEmbedding(String),

    #[error("text is empty")]
    EmptyText,

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("ratio {0} is outside [0, 1]")]
    BadRatio(f64),

    #[error("spatial dims {height}x{width} are smaller than the {window}x{window} window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("embedding has zero norm")]
    ZeroVector,

    #[error("inconsistent ablation flags: {0}")]
    InconsistentFlags(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("data error: {0}")]
    DataError(String),

    #[error("checkpoint error: {0}")]
    CheckpointError(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
