//! CLI error classes and their exit codes: 1 usage, 2 I/O, 3 numeric.

use std::fmt;
use std::path::Path;

use come_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config or token lines. Exit 1.
    Usage(String),
    /// Missing, unreadable, or malformed files. Exit 2.
    Io(String),
    /// A numerical contract violation inside the pipeline. Exit 3.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(io) => CliError::Io(io.to_string()),
            CoreError::Format(m) => CliError::Io(m),
            CoreError::Parse { position, message } => {
                CliError::Usage(format!("token {position}: {message}"))
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Annotates a core error with the file it came from; keeps "exit 2 with
/// path in message" honest.
pub fn with_path(e: CoreError, path: &Path) -> CliError {
    match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        CliError::Numeric(m) => CliError::Numeric(format!("{}: {m}", path.display())),
    }
}
