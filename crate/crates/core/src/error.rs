//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward value or loss produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Misuse of the recording tape (consumed tape, non-scalar loss, unknown node).
    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} {index} out of range [1..={max}]")]
    OutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },

    /// A parameter outside the trainable set changed during training.
    #[error("frozen parameter `{name}` changed (max abs diff {max_abs_diff:e})")]
    FrozenViolation { name: String, max_abs_diff: f64 },

    #[error("training aborted at epoch {epoch}, prompt {prompt:?}: {source}")]
    Training {
        epoch: usize,
        prompt: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint {path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("checkpoint {path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint {path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("checkpoint {path}: truncated while reading {section}")]
    Truncated { path: PathBuf, section: String },

    #[error("checkpoint {path}: parameter `{name}` has shape {found:?}, config implies {expected:?}")]
    ShapeConsistency {
        path: PathBuf,
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("config file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("cannot access {path}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
