use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke an API contract (dimension mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
    /// Config file or override failed schema validation.
    #[error("config error: {0}")]
    Config(String),
    /// A required input file or dataset entry does not exist.
    #[error("missing input: {0}")]
    MissingInput(String),
    /// Non-finite values or a numerically undefined operation.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed on-disk artifact (container, manifest, checkpoint).
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingInput(msg.into())
    }
}
