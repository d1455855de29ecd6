//! Command-line driver and HTTP query service.
//!
//! Exit status: 0 on success, 1 on invalid input or usage, 2 when a run
//! fails after its inputs were accepted.

pub mod commands;
pub mod preview;
pub mod service;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use commands::Cli;

/// A failed command with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<supergseg::Error> for Failure {
    fn from(e: supergseg::Error) -> Self {
        use supergseg::Error as E;
        let code = match &e {
            E::Config(_) | E::Domain(_) | E::Parse { .. } | E::Ingestion(_) | E::Generation(_) | E::StageOrder(_) | E::Query(_) => 1,
            E::Contract(_) | E::Training(_) | E::Evaluation(_) | E::Io(_) => 2,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

/// Parses `args` and runs the command; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .try_init();
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
