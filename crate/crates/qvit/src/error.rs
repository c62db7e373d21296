//! Error type shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An operation was called outside its contract (wrong mode, missing
    /// telemetry, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Out-of-range label or index.
    #[error("index error: {0}")]
    Index(String),

    /// Malformed input file (IDX, checkpoint framing, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Stored data fails its checksum or length check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Checkpoint version not supported by this build.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Invariant broken inside the library itself.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
