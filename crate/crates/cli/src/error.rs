use std::fmt;

use giter_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_FINDINGS: u8 = 3;
pub const EXIT_ASSERTION: u8 = 4;
pub const EXIT_TRANSPORT: u8 = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<giter_core::error::DocumentError> for CliError {
    fn from(e: giter_core::error::DocumentError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Document(_)
                | Error::Path(_)
                | Error::SchemaParse { .. }
                | Error::ValidationFailed { .. }
                | Error::Mapping { .. }
                | Error::NotTerminal { .. } => EXIT_VALIDATION,
                Error::Assertion { .. } => EXIT_ASSERTION,
                Error::PushExhausted { .. } | Error::RemoteUnavailable(_) => EXIT_TRANSPORT,
                _ => EXIT_USAGE,
            },
        }
    }
}
