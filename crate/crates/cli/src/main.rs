//! `mmvs`: dataset generation, plane sampling, training, inference and
//! evaluation for the multiplane-mask depth pipeline.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use config::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
