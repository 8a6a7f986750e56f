use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = tce_cli::Cli::parse();
    match tce_cli::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(tce_cli::exit_code(&err))
        }
    }
}
