mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::CliError;
use config::{Cli, RunConfig};

fn load_config(path: &std::path::Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up thread pool: {e}")))?;
    }
    let cfg = match (cli.command, &cli.config) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "give either a subcommand or --config, not both".into(),
            ))
        }
        (Some(c), None) => c,
        (None, Some(path)) => load_config(path)?,
        (None, None) => return Err(CliError::Usage("no subcommand given; see --help".into())),
    };
    if let Some(path) = &cli.save_config {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        std::fs::write(path, text + "\n")
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    }
    commands::dispatch(&cfg, cli.si)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
