//! Batch command-line front end for the feature-extraction pipeline.
//!
//! Stages communicate only through files (manifests, weight files, FEAT
//! feature files, prediction lists), so each stage is independently
//! testable and resumable. Every command echoes its fully resolved
//! configuration to stdout before doing work; logs go to stderr.
//!
//! Exit codes: 0 success, 2 usage, 3 bad data, 4 training divergence,
//! 5 I/O failure.

mod commands;

use clap::Parser;
use frameclass_core::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Core(Error::Io(_)) => EXIT_IO,
            CliError::Core(_) => EXIT_DATA,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(msg) => format!("usage error: {msg}"),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn main() {
    let cli = commands::Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
