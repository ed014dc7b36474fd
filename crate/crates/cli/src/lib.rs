//! Command-line front end and HTTP service for the two-stage masked ViT.
//!
//! Exit codes of [`run`]: 0 success, 2 usage, 3 malformed config or plan, 4 checksum
//! mismatch, 5 unreadable checkpoint, 6 I/O, 7 dataset, 8 model or training failure.

pub mod checkpoint;
pub mod commands;
pub mod dataset_io;
pub mod error;
pub mod pipeline;
pub mod pngio;
pub mod service;

use std::io::Write;

use clap::Parser;

pub use error::{CliError, Result};

fn init_logging() {
    let env = env_logger::Env::new().filter_or("IFAM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs one command with `argv` (program name first), printing to stdout and stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout())
}

/// Like [`run`], with primary output captured in `out`.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match commands::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
