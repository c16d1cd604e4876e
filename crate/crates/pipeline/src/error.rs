use std::path::Path;

use noddish_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Io { .. } | Self::Format { .. } => 2,
            Self::Solver(_) | Self::Numeric(_) => 3,
            Self::InvalidArgument(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn parse(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Self {
        Self::Parse { path: path.display().to_string(), line, column, message: message.into() }
    }

    pub(crate) fn format(what: &str, message: impl ToString) -> Self {
        Self::Format { what: what.to_string(), message: message.to_string() }
    }
}

impl From<CoreError> for PipelineError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(m) => Self::InvalidArgument(m),
            CoreError::Solver(m) => Self::Solver(m),
            CoreError::Numeric(m) => Self::Numeric(m),
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PipelineError::InvalidArgument(msg.into()))
}
