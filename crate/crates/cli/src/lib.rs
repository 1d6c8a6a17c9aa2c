//! Subcommands behind the `ncconv` binary.
//!
//! Every command reads a [`config::RunConfig`], writes its outputs under the
//! configured directory and reports an [`Outcome`]. Exit codes: 0 success,
//! 1 failed check, 2 usage or configuration error.

pub mod commands;
pub mod config;
pub mod data;

use std::fmt;

pub use commands::{bench, eval, gradcheck, train, verify_theory};
pub use config::{load_config, parse_config, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    CheckFailed,
}

impl Outcome {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::CheckFailed
        }
    }

    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Pass => 0,
            Outcome::CheckFailed => 1,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad config, bad paths, missing data: exit 2.
    Usage(String),
    /// A run that started but could not finish: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ncconv::Error> for CliError {
    fn from(e: ncconv::Error) -> Self {
        use ncconv::Error as E;
        match e {
            E::Config(_) | E::Geometry(_) | E::Build { .. } | E::Format { .. } | E::Checkpoint(_) | E::Io(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
