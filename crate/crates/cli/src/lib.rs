//! Command-line experiment runner: reads a JSON config, runs one experiment
//! and writes CSV/JSON results into an output directory.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use config::{resolve, ExperimentConfig, ExperimentKind, DATA_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] normlab_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 for a failed verification, 2 for bad input or environment.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            _ => 2,
        }
    }
}

/// Resolves the config and runs `kind`. Divergence is reported in the
/// outputs and is not an error.
pub fn run(
    kind: ExperimentKind,
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_file(config_path)?;
    let data_env = std::env::var_os(DATA_ENV).map(PathBuf::from);
    let resolved = resolve(kind, cfg, seed, out, data_env)?;
    match kind {
        ExperimentKind::Gradcheck => {
            commands::cmd_gradcheck(&resolved)?;
        }
        ExperimentKind::Train | ExperimentKind::Noise => {
            let s = commands::cmd_train(&resolved)?;
            report(&s);
        }
        ExperimentKind::Analyze | ExperimentKind::Regularization => {
            let s = commands::cmd_analyze(&resolved)?;
            report(&s);
        }
    }
    Ok(())
}

fn report(s: &commands::Summary) {
    println!(
        "{}: {} epochs, {} steps, divergence {}, final val acc {}, outputs in {}",
        s.command.as_str(),
        s.epochs_completed,
        s.steps,
        s.divergence,
        s.final_val_acc.map_or("-".into(), |a| format!("{a:.4}")),
        s.config.out_dir.display()
    );
}
