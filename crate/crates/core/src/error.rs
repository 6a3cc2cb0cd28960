use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid omission set: {0}")]
    InvalidOmission(String),

    #[error("omission set removes all {0} blocks")]
    EmptyModel(usize),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("sequence too short: {0}")]
    InsufficientLength(String),

    #[error("task likelihood difference needs at least one wrong answer")]
    MissingContrast,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid k = {k}: must satisfy 0 <= k <= {max}")]
    InvalidK { k: usize, max: usize },

    #[error("exhaustive search over C({n},{k}) = {count} subsets exceeds cap {cap}")]
    CombinatorialBlowup { n: usize, k: usize, count: u128, cap: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step}: non-finite gradient")]
    Divergence { step: usize },

    #[error("router is bound to pool {expected}, got pool {actual}")]
    PoolBinding { expected: String, actual: String },

    #[error("failed to load block {block}: {source}")]
    BlockLoad {
        block: usize,
        #[source]
        source: std::io::Error,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid bandwidth {0}: must be positive")]
    InvalidBandwidth(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config/validation, 3 algorithmic, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidK { .. } | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::BlockLoad { .. } | Error::Format(_) | Error::Json(_) => 4,
            Error::Sample { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
