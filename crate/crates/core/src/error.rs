use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Every variant carries a stable machine-readable code (see [`Error::code`])
/// that the CLI prints in front of the human message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate item id `{0}`")]
    DuplicateId(String),

    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corrupt bag file: {0}")]
    CorruptBag(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "E_ARG",
            Error::Manifest { .. } => "E_MANIFEST",
            Error::DuplicateId(_) => "E_DUPLICATE_ID",
            Error::Image { .. } => "E_IMAGE",
            Error::Shape(_) => "E_SHAPE",
            Error::CorruptCheckpoint(_) => "E_CKPT_CORRUPT",
            Error::CorruptBag(_) => "E_BAG_CORRUPT",
            Error::CheckpointMismatch(_) => "E_CKPT_MISMATCH",
            Error::StageOrder(_) => "E_STAGE_ORDER",
            Error::InsufficientData(_) => "E_DATA",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
