use std::process::ExitCode;

use clap::Parser;
use photostyle_cli::{execute, validate, Args};

fn main() -> ExitCode {
    // clap prints usage and exits with status 2 on malformed flags
    let args = Args::parse();
    let result = validate(args).and_then(|job| execute(&job, |line| eprintln!("{line}")));
    match result {
        Ok(artifacts) => {
            eprintln!("wrote {}", artifacts.image.display());
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
