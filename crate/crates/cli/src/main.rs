use std::process::ExitCode;

use clap::Parser;
use hsi_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match hsi_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
