//! Command-line front end: configuration, artifact formats, ingestion and
//! the subcommands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod formats;
pub mod ingest;
pub mod manifest;

use std::ffi::OsString;

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on a usage or configuration error, 2 on a runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let inv = match cli::parse(argv) {
        Ok(inv) => inv,
        Err(cli::CliError::Display(s)) => {
            print!("{s}");
            return 0;
        }
        Err(cli::CliError::Usage(s)) => {
            eprint!("{s}");
            if !s.ends_with('\n') {
                eprintln!();
            }
            return 1;
        }
    };
    match commands::run(&inv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<config::ConfigError>() || e.is::<commands::UsageError>() {
                1
            } else {
                2
            }
        }
    }
}
