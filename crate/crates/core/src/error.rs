use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in row {row} of {what}")]
    NonFinite { what: String, row: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("encoder layer {layer}: non-finite value after {stage}")]
    EncoderNonFinite { layer: usize, stage: &'static str },

    #[error("missing metadata field `{field}` for {item}")]
    MissingMetadata { field: &'static str, item: String },

    #[error("store format error in {path}: {reason}")]
    StoreFormat { path: String, reason: String },

    #[error("store {path}: unsupported version {version}")]
    StoreVersion { path: String, version: u32 },

    #[error("store {path}: truncated {what}: expected {expected} bytes, found {found}")]
    StoreTruncated {
        path: String,
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("store {path}: non-finite value at row {row}, column {col}")]
    StoreNonFinite { path: String, row: usize, col: usize },

    #[error("config {path}:{line}: {reason}")]
    Config {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },

    #[error("graph construction failed after {attempts} attempts; bottleneck stage `{stage}` ({failures} failures)")]
    GraphBudgetExhausted {
        attempts: usize,
        stage: &'static str,
        failures: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
