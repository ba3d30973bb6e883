//! Crate-wide error type.

use thiserror::Error;

/// Coarse error class, used by callers that map failures to process exit
/// codes (configuration vs. data/format vs. runtime).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("index out of bounds: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("judge response parse error: {msg}; raw response: {raw:?}")]
    JudgeParse { msg: String, raw: String },

    #[error("http error: {0}")]
    Http(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Data(_) | Error::Format(_) | Error::JudgeParse { .. } => ErrorClass::Data,
            Error::Dim(_)
            | Error::Index(_)
            | Error::Training { .. }
            | Error::Http(_)
            | Error::Io(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
