//! Command implementations behind the `mmt` binary.

pub mod commands;
pub mod config;

use std::fmt;

pub use config::RunConfig;

/// A failed command and its process exit code: 1 for usage errors, 2 for
/// data errors.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<mmt_core::Error> for CliError {
    fn from(e: mmt_core::Error) -> Self {
        CliError::data(e.to_string())
    }
}
