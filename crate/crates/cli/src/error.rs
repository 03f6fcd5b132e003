use std::fmt;

use minfo_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_MAX_ITER: i32 = 3;
pub const EXIT_CCP_INFEASIBLE: i32 = 4;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        CliError::new(EXIT_PARSE, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error. Anything that is not infeasibility or an
/// iteration limit is an input problem.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible(_) | Error::BlockInfeasible(_) => EXIT_INFEASIBLE,
        Error::IterationLimit(_) => EXIT_MAX_ITER,
        Error::ConvergedInfeasible { .. } => EXIT_CCP_INFEASIBLE,
        _ => EXIT_PARSE,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError::new(exit_code(&err), err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::parse(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::parse(err.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
