//! `acevc`: corpus generation, training, conversion and evaluation.
//!
//! Every command writes into a run directory under the output root
//! (`ACEVC_RUN_DIR`, default `runs/`): the resolved config, a `run.txt`
//! record with the seed, the command line and sha256 hashes of every input
//! and output artifact, plus the command's own outputs.

mod commands;
mod run_dir;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(hint) = commands::hint(&e) {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(2)
        }
    }
}
