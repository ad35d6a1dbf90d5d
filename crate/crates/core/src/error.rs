use thiserror::Error;
use wfn_tensor::TensorError;

/// Failures while decoding a container file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("missing dataset `{0}`")]
    MissingDataset(String),
    #[error("dataset `{name}` has shape {found:?}, expected {expected}")]
    ShapeMismatch {
        name: String,
        expected: String,
        found: Vec<usize>,
    },
    #[error("dataset `{name}` has dtype `{found}`, expected float32")]
    DtypeMismatch { name: String, found: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for caller mistakes: bad shapes, sizes or configs.
    pub fn is_invalid_argument(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Tensor(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
