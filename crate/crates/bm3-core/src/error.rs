//! Error types shared across the engine.

use std::path::PathBuf;

/// Coarse classification used by callers that must map failures to
/// process exit codes: bad configuration, bad input data, or a numeric
/// blow-up during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Divergence,
}

/// Unified error type for the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: no interaction records found")]
    EmptyInput { path: PathBuf },

    #[error("interaction dataset is empty")]
    EmptyDataset,

    #[error("k-core order must be at least 1 (got {k})")]
    InvalidKCore { k: u32 },

    #[error("user {user_key:?} has only {count} interactions; at least 3 are required to split")]
    TooFewInteractions { user_key: String, count: usize },

    #[error("key {key:?} is missing from the {kind} index map")]
    UnknownKey { kind: &'static str, key: String },

    #[error("index map {path} is not a contiguous 0..n mapping (problem near line {line})")]
    BadIndexMap { path: PathBuf, line: usize },

    #[error("{path}: bad magic bytes, not a feature-matrix file")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported feature-matrix version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{path}: payload size mismatch, expected {expected} f32 values, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFiniteValue { path: PathBuf, row: usize, col: usize },

    #[error("feature matrix {path} has {found} rows but the dataset has {expected} items")]
    FeatureRowMismatch {
        path: PathBuf,
        found: usize,
        expected: usize,
    },

    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("edge ({user}, {item}) is out of range for {num_users} users x {num_items} items")]
    EdgeOutOfRange {
        user: u32,
        item: u32,
        num_users: usize,
        num_items: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("zero-norm vector passed to cosine similarity")]
    ZeroNorm,

    #[error("loss evaluated on an empty batch")]
    EmptyBatch,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: training diverged")]
    Diverged { epoch: usize, batch: usize },

    #[error("checkpoint at {path} is incomplete: missing {missing}")]
    IncompleteCheckpoint { path: PathBuf, missing: String },

    #[error("checkpoint does not match the dataset: {0}")]
    CheckpointMismatch(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Which exit-code class this failure belongs to.
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidKCore { .. }
            | InvalidParameter { .. }
            | InvalidConfig(_)
            | DimensionMismatch { .. } => ErrorClass::Config,
            ZeroNorm | Diverged { .. } => ErrorClass::Divergence,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
