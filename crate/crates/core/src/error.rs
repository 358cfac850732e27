use std::path::PathBuf;

/// Errors produced anywhere in the simulator pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("particles {i} and {j} coincide with zero softening")]
    Coincident { i: usize, j: usize },
    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
