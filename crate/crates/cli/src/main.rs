mod args;
mod commands;
mod dataset;
mod error;
mod imgio;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Cmd};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are not usage errors
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => commands::train(a),
        Cmd::Infer(a) => commands::infer(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Bench(a) => commands::bench(a),
        Cmd::Quality(a) => commands::quality(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
