//! `sar` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input, 2 failure while running.

mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;
use sar_core::SarError;

use args::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<SarError> for CliError {
    fn from(e: SarError) -> Self {
        match e {
            SarError::NonFinite(_) | SarError::Degenerate(_) | SarError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads.unwrap_or(1);
    if threads == 0 {
        return Err(CliError::Validation("--threads: must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("--threads: {e}")))?;
    match &cli.command {
        Command::Train(a) => commands::train(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Predict(a) => commands::predict(a),
        Command::Semantics(a) => commands::semantics(a, threads),
        Command::Sweep(a) => commands::sweep(a, threads),
        Command::Baseline(a) => commands::baseline(a, threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
