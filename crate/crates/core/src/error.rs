use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed architecture string or config text.
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    /// Two values that must agree (shapes, spaces, configs) do not.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The operation refuses to run because it would be too large.
    #[error("refused: {0}")]
    Refused(String),

    /// A loss or score became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Correlation of a constant sequence.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
