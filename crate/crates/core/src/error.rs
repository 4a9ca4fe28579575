use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than the
    /// environment. The CLI maps these to exit code 1 and I/O failures to 2.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }

    /// I/O failure with the offending path in the message.
    pub fn io_at(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        let msg = format!("{}: {err}", path.as_ref().display());
        Error::Io(std::io::Error::new(err.kind(), msg))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
