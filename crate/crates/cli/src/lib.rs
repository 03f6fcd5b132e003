//! Command-line harness around `minfo-core`.
//!
//! Every command that produces data writes a `manifest.json` next to its
//! outputs; `replay` re-runs one and compares output hashes.

pub mod cli;
pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use cli::{Cli, Command};
pub use commands::{execute, loglog_slope, scaling_study, Context, ScalingRow};
pub use error::{CliError, EXIT_CCP_INFEASIBLE, EXIT_INFEASIBLE, EXIT_MAX_ITER, EXIT_OK, EXIT_PARSE};
pub use manifest::RunManifest;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Usage errors exit 1.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_PARSE,
            };
        }
    };
    let cwd = match std::env::current_dir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: cannot read working directory: {e}");
            return EXIT_PARSE;
        }
    };
    let ctx = Context {
        args: argv.iter().skip(1).map(|s| s.to_string_lossy().into_owned()).collect(),
        cwd: cwd.clone(),
    };
    let mut command = cli.command;
    command.absolutize(&cwd);
    match execute(command, &ctx) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
