mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Returned when engine output diverges from the full-depth baseline.
#[derive(Debug)]
pub struct Mismatch(pub String);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

const EXIT_MISMATCH: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Mismatch>() {
            return EXIT_MISMATCH;
        }
        if let Some(e) = cause.downcast_ref::<specbound::Error>() {
            return match e {
                specbound::Error::Io(_)
                | specbound::Error::Csv(_)
                | specbound::Error::Checkpoint(_)
                | specbound::Error::Trace(_) => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BuildTrain(a) => commands::build_train(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::LayerScan(a) => commands::layer_scan(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::ModelEval(a) => commands::model_eval(&a),
        Command::Mc(a) => commands::mc(&a),
        Command::Replay(a) => commands::replay(&a),
        Command::SpeedupDist(a) => commands::speedup_dist(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
