use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the checkpoint and cache readers.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorruptKind {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated file")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("layer transfer error: {0}")]
    Transfer(String),
    #[error("model is already quantized")]
    AlreadyQuantized,
    #[error("integer accumulator overflow: inner dimension {0} exceeds 65536")]
    Overflow(usize),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("corrupt checkpoint {path}: {kind}")]
    Corrupt { path: PathBuf, kind: CorruptKind },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, kind: CorruptKind) -> Self {
        Error::Corrupt {
            path: path.into(),
            kind,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            Error::Io { .. } | Error::Corrupt { .. } => 4,
            _ => 2,
        }
    }
}
