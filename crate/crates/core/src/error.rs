use std::fmt;

/// Errors raised by the toolkit.
///
/// The variants map onto the three failure families callers care about:
/// bad input data, bad configuration or usage, and I/O. The command-line
/// driver turns them into exit codes with [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("data error{}: {message}", Location(*.line))]
    Data { line: Option<usize>, message: String },

    #[error("invalid UTF-8 at byte offset {offset}")]
    Utf8 { offset: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown language: {0}")]
    UnknownLanguage(String),
}

struct Location(Option<usize>);

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(line) => write!(f, " at line {line}"),
            None => Ok(()),
        }
    }
}

impl Error {
    pub fn data(message: impl Into<String>) -> Self {
        Error::Data { line: None, message: message.into() }
    }

    pub fn data_at(line: usize, message: impl Into<String>) -> Self {
        Error::Data { line: Some(line), message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    /// Process exit code: 1 for usage and configuration problems, 2 for
    /// data and I/O problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Contract(_) | Error::UnknownLanguage(_) => 1,
            Error::Io(_) | Error::Data { .. } | Error::Utf8 { .. } => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
