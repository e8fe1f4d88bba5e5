use std::fmt;

/// Library-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    Shape(String),
    /// Bad configuration (head divisibility, fusion arity, lambda range, ...).
    Config(String),
    /// Invalid input data (too-short waveform, empty transcript, ...).
    Input(String),
    /// Numeric failure (NaN loss, non-finite input where finite required).
    Numeric(String),
    /// Malformed feature/checkpoint file (bad magic, truncation, dim mismatch).
    Format(String),
    /// A label sequence too long for its frame sequence under CTC.
    Length(String),
    /// Filesystem problem wrapping the offending path.
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Length(msg) => write!(f, "length error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
