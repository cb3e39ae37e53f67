//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Bad input data (e.g. token id out of vocabulary range).
    #[error("input error: {0}")]
    Input(String),

    /// A checkpoint or report file failed validation.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// Bad configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A loss or score became non-finite.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::Io(_) | Error::Corruption(_) | Error::Parse(_) => 4,
            _ => 2,
        }
    }
}
