//! Experiment configuration files (JSON) and their resolution into concrete
//! settings.
//!
//! Every key is optional; missing keys take the defaults of the command being
//! run. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use normlab_core::analysis::AnalysisConfig;
use normlab_core::data::Augment;
use normlab_core::network::{
    batch_scaled_lr, micro_cnn, DivergenceThresholds, LayerSpec, NoiseSpec, OptimizerConfig,
    OptimizerKind, ScheduleStep, TrainConfig,
};
use normlab_core::norm::NormVariant;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_ENV: &str = "NORMLAB_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    Analyze,
    Noise,
    Regularization,
    Gradcheck,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Analyze => "analyze",
            ExperimentKind::Noise => "noise",
            ExperimentKind::Regularization => "regularization",
            ExperimentKind::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub norm: NormVariant,
    pub groups: usize,
    /// Channels of the first stage; later stages use twice as many.
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            norm: NormVariant::Group,
            groups: 8,
            width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_n_per_class")]
        n_per_class: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        /// Image height and width.
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
        /// Per-class size of a held-out set drawn with `seed + 1`; 0 disables
        /// validation.
        #[serde(default = "default_val_per_class")]
        val_per_class: usize,
    },
    Cifar10 {
        /// Falls back to `NORMLAB_DATA` when absent.
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Class-balanced subset sizes taken from the front of each split.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        val_limit: Option<usize>,
    },
}

fn default_n_per_class() -> usize {
    200
}

fn default_classes() -> usize {
    3
}

fn default_size() -> usize {
    16
}

fn default_val_per_class() -> usize {
    50
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Cifar10 {
            dir: None,
            train_limit: None,
            val_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrFormula {
    /// `0.1 · batch_size / 128`.
    Formula,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSetting {
    Value(f64),
    Formula(LrFormula),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Case names whose analytic gradient is deliberately corrupted, for
    /// exercising the failure path.
    pub corrupt: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseComparison {
    /// Each seed is run once with and once without the noise hooks.
    pub seeds: Vec<u64>,
}

/// The file as written by the user.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub model: ModelConfig,
    pub dataset: Option<DatasetConfig>,
    pub batch_size: Option<usize>,
    pub lr: Option<LrSetting>,
    pub optimizer: Option<OptimizerKind>,
    pub epochs: Option<usize>,
    pub schedule: Option<Vec<ScheduleStep>>,
    pub weight_decay: Option<f64>,
    pub decay_norm_params: Option<bool>,
    pub noise: Option<NoiseSpec>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub analysis: Option<AnalysisConfig>,
    pub augment: Option<Augment>,
    pub thresholds: Option<DivergenceThresholds>,
    pub gradcheck: Option<GradcheckConfig>,
    pub noise_comparison: Option<NoiseComparison>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Input(format!("invalid config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

pub const NOISE_MU: f64 = 1e-3;
pub const NOISE_SIGMA: f64 = 1.001;

/// Everything a run needs, after defaults and the learning-rate formula
/// have been applied. Written verbatim to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub experiment: ExperimentKind,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub batch_size: usize,
    /// Effective learning rate.
    pub lr: f64,
    pub lr_from_formula: bool,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub schedule: Vec<ScheduleStep>,
    pub weight_decay: f64,
    pub decay_norm_params: bool,
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub analysis: Option<AnalysisConfig>,
    pub augment: Augment,
    pub thresholds: DivergenceThresholds,
    pub gradcheck: Option<GradcheckConfig>,
    pub noise_comparison: Option<NoiseComparison>,
}

struct Defaults {
    batch_size: usize,
    lr: LrSetting,
    optimizer: OptimizerKind,
    epochs: usize,
    schedule: Vec<ScheduleStep>,
    weight_decay: f64,
}

fn defaults(kind: ExperimentKind) -> Defaults {
    let adam = |epochs, weight_decay| Defaults {
        batch_size: 128,
        lr: LrSetting::Value(1e-3),
        optimizer: OptimizerKind::adam(),
        epochs,
        schedule: vec![],
        weight_decay,
    };
    match kind {
        ExperimentKind::Train | ExperimentKind::Gradcheck => Defaults {
            batch_size: 128,
            lr: LrSetting::Formula(LrFormula::Formula),
            optimizer: OptimizerKind::sgd(0.9),
            epochs: 164,
            schedule: vec![
                ScheduleStep { epoch: 81, multiplier: 0.1 },
                ScheduleStep { epoch: 122, multiplier: 0.1 },
            ],
            weight_decay: 1e-4,
        },
        ExperimentKind::Analyze => adam(20, 0.0),
        ExperimentKind::Regularization => adam(20, 5e-5),
        ExperimentKind::Noise => adam(50, 0.0),
    }
}

/// Applies command defaults and command-line overrides, then validates the
/// result. `data_env` is the value of `NORMLAB_DATA`, if set.
pub fn resolve(
    kind: ExperimentKind,
    cfg: ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    data_env: Option<PathBuf>,
) -> Result<ResolvedConfig, CliError> {
    if let Some(k) = cfg.experiment {
        if k != kind {
            return Err(CliError::Input(format!(
                "config is for `{}` but the `{}` command was run",
                k.as_str(),
                kind.as_str()
            )));
        }
    }
    let d = defaults(kind);
    let batch_size = cfg.batch_size.unwrap_or(d.batch_size);
    if batch_size == 0 {
        return Err(CliError::Input("batch_size must be at least 1".into()));
    }
    let lr_setting = cfg.lr.unwrap_or(d.lr);
    let (lr, lr_from_formula) = match lr_setting {
        LrSetting::Value(v) => (v, false),
        LrSetting::Formula(_) => (batch_scaled_lr(batch_size), true),
    };
    let noise = match kind {
        ExperimentKind::Noise => Some(cfg.noise.unwrap_or(NoiseSpec {
            mu: NOISE_MU,
            sigma: NOISE_SIGMA,
        })),
        _ => cfg.noise,
    };
    if cfg.noise_comparison.is_some() && kind != ExperimentKind::Noise {
        return Err(CliError::Input("noise_comparison is only valid for the noise command".into()));
    }
    if let Some(c) = &cfg.noise_comparison {
        if c.seeds.is_empty() {
            return Err(CliError::Input("noise_comparison.seeds is empty".into()));
        }
    }
    let dataset = match cfg.dataset.unwrap_or_default() {
        DatasetConfig::Cifar10 {
            dir,
            train_limit,
            val_limit,
        } => DatasetConfig::Cifar10 {
            dir: dir.or(data_env),
            train_limit,
            val_limit,
        },
        synth => synth,
    };
    let analysis = match kind {
        ExperimentKind::Analyze | ExperimentKind::Regularization => {
            Some(cfg.analysis.unwrap_or_default())
        }
        _ if cfg.analysis.is_some() => {
            return Err(CliError::Input(
                "analysis settings are only valid for analyze and regularization".into(),
            ))
        }
        _ => None,
    };
    let resolved = ResolvedConfig {
        experiment: kind,
        model: cfg.model,
        dataset,
        batch_size,
        lr,
        lr_from_formula,
        optimizer: cfg.optimizer.unwrap_or(d.optimizer),
        epochs: cfg.epochs.unwrap_or(d.epochs),
        schedule: cfg.schedule.unwrap_or(d.schedule),
        weight_decay: cfg.weight_decay.unwrap_or(d.weight_decay),
        decay_norm_params: cfg.decay_norm_params.unwrap_or(false),
        noise,
        seed: seed.or(cfg.seed).unwrap_or(0),
        out_dir: out.or(cfg.out_dir).unwrap_or_else(|| PathBuf::from("out")),
        analysis,
        augment: cfg.augment.unwrap_or_default(),
        thresholds: cfg.thresholds.unwrap_or_default(),
        gradcheck: match kind {
            ExperimentKind::Gradcheck => Some(cfg.gradcheck.unwrap_or_default()),
            _ => cfg.gradcheck,
        },
        noise_comparison: cfg.noise_comparison,
    };
    resolved.validate()?;
    Ok(resolved)
}

impl ResolvedConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.experiment == ExperimentKind::Gradcheck {
            return Ok(());
        }
        self.optimizer_config().validate()?;
        if let Some(a) = &self.analysis {
            a.validate()?;
        }
        if self.model.width == 0 {
            return Err(CliError::Input("model.width must be at least 1".into()));
        }
        // Building the network checks group divisibility and noise values.
        normlab_core::network::Model::build(&self.layer_specs(3, 2), 3, 0)?;
        if let DatasetConfig::Synthetic { classes, n_per_class, size, .. } = self.dataset {
            if classes < 2 || n_per_class == 0 || size == 0 {
                return Err(CliError::Input(
                    "synthetic dataset needs classes >= 2 and non-zero n_per_class and size".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            decay_norm_params: self.decay_norm_params,
            schedule: self.schedule.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer_config(),
            seed: self.seed,
            thresholds: self.thresholds,
            augment: self.augment,
        }
    }

    pub fn layer_specs(&self, in_channels: usize, classes: usize) -> Vec<LayerSpec> {
        micro_cnn(
            in_channels,
            classes,
            self.model.width,
            self.model.norm,
            self.model.groups,
            self.noise,
        )
    }
}
