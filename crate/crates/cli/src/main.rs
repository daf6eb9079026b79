mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// A problem with how the tool was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<introspect_core::Error>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
        }
    }
    EXIT_RUNTIME
}

/// The error chain joined by ": ", skipping causes already quoted by the
/// message before them.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|prev| prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    let result = match &cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::ExtractFeatures(a) => commands::extract_features(a),
        Command::Train(a) => commands::train(a),
        Command::CalibrateCp(a) => commands::calibrate_cp(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Monitor(a) => commands::monitor(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
