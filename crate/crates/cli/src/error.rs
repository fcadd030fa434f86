use std::path::{Path, PathBuf};

use thiserror::Error;

/// Decoding failure inside a byte buffer.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: u64,
    pub message: String,
}

impl ParseError {
    pub fn new(offset: u64, message: impl Into<String>) -> Self {
        ParseError {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or inputs that do not fit together.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("validation error: {0}")]
    Core(#[from] msrt_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: parse error {source}", path.display())]
    Parse { path: PathBuf, source: ParseError },

    /// Malformed text input (JSON, CSV) where a byte offset is not meaningful.
    #[error("{}: parse error: {message}", path.display())]
    Syntax { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, source: ParseError) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn syntax(path: &Path, message: impl ToString) -> Self {
        CliError::Syntax {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// 1 for validation failures, 2 for I/O and parse failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Core(_) => 1,
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Syntax { .. } => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
