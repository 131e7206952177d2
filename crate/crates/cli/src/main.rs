use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use normlab::config::ExperimentKind;

/// Run a normalization experiment described by a JSON config file.
#[derive(Debug, Parser)]
#[command(name = "normlab", version)]
struct Cli {
    #[arg(value_enum)]
    command: ExperimentKind,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match normlab::run(cli.command, &cli.config, cli.seed, cli.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
