//! Library side of the `mshvit` binary so the command set can be driven in-process.

pub mod args;
mod commands;
pub mod config;
mod output;

use std::ffi::OsString;

use clap::Parser;
use mshvit_core::CoreError;

pub use output::RUN_MANIFEST_PREFIX;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<mshvit_metrics::MetricError> for CliError {
    fn from(e: mshvit_metrics::MetricError) -> Self {
        CliError::Core(e.into())
    }
}

/// Parses `argv` (including the program name) and runs the command. Returns the exit code:
/// 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
