use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty neighborhood for query {0}")]
    EmptyMaskRow(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("pgm {path}: {kind}")]
    Pgm { path: PathBuf, kind: PgmError },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("bad magic {0:?}, expected binary P5")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}, expected 255")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("tensor {name}: byte range {start}..{end} is out of bounds or overlaps (payload is {payload} bytes)")]
    Bounds {
        name: String,
        start: u64,
        end: u64,
        payload: u64,
    },
    #[error("tensor {name}: shape {found:?} disagrees with model config shape {expected:?}")]
    ShapeDisagreement {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("manifest lists {found} tensors, model config expects {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("tensor name {found:?} where {expected:?} was expected")]
    Name { expected: String, found: String },
    #[error("header: {0}")]
    Header(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
