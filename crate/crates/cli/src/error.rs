//! CLI error taxonomy with fixed exit codes for scripting:
//! 2 input, 3 data, 4 shape, 5 gallery, 64 usage.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or missing inputs (files, directories, parse failures).
    Input(String),
    /// Inputs parsed but the data cannot support the operation.
    Data(String),
    /// Dimension or shape contract violations.
    Shape(String),
    /// Gallery too small or otherwise unusable for evaluation.
    Gallery(String),
    /// Bad flag combinations or values.
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Data(_) => 3,
            CliError::Shape(_) => 4,
            CliError::Gallery(_) => 5,
            CliError::Usage(_) => 64,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Shape(m) => write!(f, "shape error: {m}"),
            CliError::Gallery(m) => write!(f, "gallery error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
