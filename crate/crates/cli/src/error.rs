//! Top-level CLI error: either a direct failure or one annotated with the
//! pipeline stage it happened in. Exit codes follow the library's mapping
//! (2 config, 3 constraint unmet, 4 anything else), with the stage wrapper
//! preserving the inner code.

use std::fmt;

use graphmask_core::Error;

#[derive(Debug)]
pub enum CliError {
    Direct(Error),
    Stage { stage: &'static str, source: Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Direct(e) => e.exit_code(),
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Direct(e) => write!(f, "{e}"),
            CliError::Stage { stage, source } => {
                write!(f, "pipeline stage '{stage}' failed: {source}")
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Direct(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
