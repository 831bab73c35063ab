//! `prunekit`: filter pruning experiments from the command line.
//!
//! Exit codes: 0 success, 2 bad configuration or input validation, 3 I/O or
//! file-format problems, 4 internal invariant, shape or state violations.

mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use prunekit::Error;

use args::Cli;
use config::Config;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Invariant(_) | Error::Shape { .. } | Error::State(_) => 4,
    }
}

fn run(cli: Cli) -> prunekit::Result<()> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    }
    .with_seed(cli.seed);
    let command = cli.command.with_absolute_paths()?;
    commands::execute(&command, &config, cli.out_dir, cli.format.unwrap_or_default())?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
