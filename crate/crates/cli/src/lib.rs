//! File formats, demo fixtures and error mapping behind the `matx` binary.
//!
//! Exit codes: 0 ok, 1 check failed, 2 bad input, 3 optimization failure.

pub mod demo;
pub mod io;

use std::fmt;

use matx_core::Error;

/// Seed of the built-in extractor used when no weight file is given.
pub const EXTRACTOR_SEED: u64 = 0;

/// A message and the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn input(e: impl fmt::Display) -> Self {
        Self {
            code: 2,
            msg: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::EmptyRule { .. }
            | Error::Diverged { .. }
            | Error::NonFinite { .. }
            | Error::DivisionByZero { .. } => 3,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}
