use std::path::PathBuf;

/// Error type shared by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("{path}: bad magic number {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        got: u32,
        expected: u32,
    },

    #[error("{path}: truncated or length-mismatched payload ({detail})")]
    LengthMismatch { path: PathBuf, detail: String },

    #[error("checkpoint version {got} not supported (expected {expected})")]
    Version { got: u32, expected: u32 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("missing normalization statistics for the global score")]
    MissingNormStats,

    #[error("metric requires both classes, got only one")]
    SingleClass,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
