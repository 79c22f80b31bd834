//! Command-line error taxonomy and exit codes.
//!
//! 0 success, 1 usage error, 2 data/validation error, 3 runtime/numerics
//! error. Library errors are classified by what went wrong, not where: bad
//! input files land on 2, failures while computing land on 3.

use std::fmt;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug)]
pub enum CliError {
    /// The invocation itself is wrong (exit 1).
    Usage(String),
    /// An input file or configuration failed validation (exit 2).
    Data(String),
    /// The computation failed after valid inputs (exit 3).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<aolab::Error> for CliError {
    fn from(e: aolab::Error) -> Self {
        match e {
            aolab::Error::InvalidCorpusByte { .. }
            | aolab::Error::InvalidTokenId(_)
            | aolab::Error::CheckpointFormat(_)
            | aolab::Error::Io(_) => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
