use std::process::ExitCode;

use clap::Parser;
use tracing::Level;
use vcaptcha_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            let rec = CliError::InvalidInput(e.kind().to_string()).record("usage");
            println!("{rec}");
            return ExitCode::from(2);
        }
    };
    let level = if cli.global.quiet { Level::WARN } else { Level::INFO };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false)
        .init();
    let name = cli.command.name();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            tracing::error!("{e}");
            println!("{}", e.record(name));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
