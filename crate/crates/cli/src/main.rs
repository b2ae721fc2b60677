use std::process::ExitCode;

use clap::Parser;

use sparsepool_cli::{run, Cli, INPUT_ERROR_EXIT};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(INPUT_ERROR_EXIT)
        }
    }
}
