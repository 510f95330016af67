use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Kernel does not fit the (padded) input.
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("index error: {0}")]
    Index(String),
    /// A caller broke an API contract (non-scalar loss, repeated backward, ...).
    #[error("contract error: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("degenerate variance: paired differences are constant and nonzero")]
    DegenerateVariance,
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    /// Wrong magic bytes or otherwise not a checkpoint.
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    /// Truncated file or tensor shapes that disagree with the embedded architecture.
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
