use std::path::PathBuf;
use std::time::Instant;

use normlab_core::analysis::{run_analysis, AnalysisSeries};
use normlab_core::checkpoint;
use normlab_core::data::{load_cifar10, synth_dataset, LabeledImageSet, Split};
use normlab_core::gradcheck::{run_suite, standard_suite, DEFAULT_TOLERANCE};
use normlab_core::network::{train, Model, NoiseSpec, TrainOutcome};
use serde::Serialize;

use crate::config::{DatasetConfig, ExperimentKind, ResolvedConfig};
use crate::output::{self, NoiseComparisonRow};
use crate::CliError;

/// What a finished command produced.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub command: ExperimentKind,
    pub seed: u64,
    pub effective_lr: f64,
    pub wall_time_secs: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs_completed: usize,
    pub steps: u64,
    pub divergence: String,
    pub final_train_loss: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_val_acc: Option<f64>,
    pub best_val_acc: Option<f64>,
    pub final_lambdas: Vec<f64>,
    pub noise: Option<NoiseSpec>,
    pub landscape_samples: Option<usize>,
    pub gradpred_samples: Option<usize>,
    pub noise_comparison: Option<Vec<NoiseComparisonRow>>,
    pub files: Vec<PathBuf>,
    pub config: ResolvedConfig,
}

#[derive(Debug, Clone, Serialize)]
struct GradcheckSummary<'a> {
    command: ExperimentKind,
    seed: u64,
    tolerance: f64,
    passed: bool,
    wall_time_secs: f64,
    cases: Vec<(String, f64)>,
    config: &'a ResolvedConfig,
}

pub fn load_data(cfg: &ResolvedConfig) -> Result<(LabeledImageSet, Option<LabeledImageSet>), CliError> {
    match &cfg.dataset {
        &DatasetConfig::Synthetic {
            n_per_class,
            classes,
            size,
            seed,
            val_per_class,
        } => {
            let train = synth_dataset(seed, n_per_class, classes, size, size)?;
            let val = if val_per_class > 0 {
                let mut v = synth_dataset(seed.wrapping_add(1), val_per_class, classes, size, size)?;
                v.split = Split::Val;
                Some(v)
            } else {
                None
            };
            Ok((train, val))
        }
        DatasetConfig::Cifar10 {
            dir,
            train_limit,
            val_limit,
        } => {
            let dir = dir.as_ref().ok_or_else(|| {
                CliError::Input(format!(
                    "no CIFAR-10 directory: set dataset.dir in the config or {}",
                    crate::config::DATA_ENV
                ))
            })?;
            let (mut train, mut val) = load_cifar10(dir)?;
            if let Some(n) = train_limit {
                train = train.take_balanced(*n)?;
            }
            if let Some(n) = val_limit {
                val = val.take_balanced(*n)?;
            }
            Ok((train, Some(val)))
        }
    }
}

fn last<T: Copy>(outcome: &TrainOutcome, f: impl Fn(&normlab_core::network::EpochMetrics) -> Option<T>) -> Option<T> {
    outcome.epochs.iter().rev().find_map(f)
}

fn base_summary(
    cfg: &ResolvedConfig,
    outcome: &TrainOutcome,
    train_set: &LabeledImageSet,
    val_set: Option<&LabeledImageSet>,
    start: Instant,
) -> Summary {
    Summary {
        command: cfg.experiment,
        seed: cfg.seed,
        effective_lr: cfg.lr,
        wall_time_secs: 0.0,
        train_samples: train_set.len(),
        val_samples: val_set.map_or(0, |v| v.len()),
        epochs_completed: outcome.epochs.len(),
        steps: outcome.steps,
        divergence: outcome.divergence.as_str().to_string(),
        final_train_loss: last(outcome, |e| e.train_loss),
        final_train_acc: last(outcome, |e| e.train_acc),
        final_val_acc: last(outcome, |e| e.val_acc),
        best_val_acc: outcome
            .epochs
            .iter()
            .filter_map(|e| e.val_acc)
            .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a)))),
        final_lambdas: outcome.final_lambdas.clone(),
        noise: cfg.noise,
        landscape_samples: None,
        gradpred_samples: None,
        noise_comparison: None,
        files: Vec::new(),
        config: cfg.clone(),
    }
    .timed(start)
}

impl Summary {
    fn timed(mut self, start: Instant) -> Self {
        self.wall_time_secs = start.elapsed().as_secs_f64();
        self
    }
}

fn build_model(cfg: &ResolvedConfig, data: &LabeledImageSet) -> Result<Model, CliError> {
    let (c, _, _) = data.image_shape();
    Ok(Model::build(&cfg.layer_specs(c, data.classes), c, cfg.seed)?)
}

fn progress(cfg: &ResolvedConfig, outcome: &TrainOutcome) {
    for e in &outcome.epochs {
        eprintln!(
            "[{} seed {}] epoch {:>3} lr {} train_loss {} train_acc {} val_acc {} {}",
            cfg.experiment.as_str(),
            cfg.seed,
            e.epoch,
            e.lr,
            e.train_loss.map_or("-".into(), |v| format!("{v:.4}")),
            e.train_acc.map_or("-".into(), |v| format!("{v:.4}")),
            e.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            e.divergence.as_str(),
        );
    }
}

/// `train` and `noise`: one training run, plus the optional paired
/// noise/no-noise comparison.
pub fn cmd_train(cfg: &ResolvedConfig) -> Result<Summary, CliError> {
    let start = Instant::now();
    let (train_set, val_set) = load_data(cfg)?;
    let mut model = build_model(cfg, &train_set)?;
    output::ensure_dir(&cfg.out_dir)?;
    let outcome = train(&mut model, &train_set, val_set.as_ref(), &cfg.train_config())?;
    progress(cfg, &outcome);

    let mut files = vec![output::write_metrics(&cfg.out_dir, model.lambdas().len(), &outcome.epochs)?];
    let ck = cfg.out_dir.join(output::CHECKPOINT_FILE);
    checkpoint::save(&model, &ck)?;
    files.push(ck);

    let mut comparison = None;
    if let Some(c) = &cfg.noise_comparison {
        let mut rows = Vec::new();
        for &seed in &c.seeds {
            let run = |noise: Option<NoiseSpec>| -> Result<TrainOutcome, CliError> {
                let mut sub = cfg.clone();
                sub.seed = seed;
                sub.noise = noise;
                let mut m = build_model(&sub, &train_set)?;
                let out = train(&mut m, &train_set, val_set.as_ref(), &sub.train_config())?;
                progress(&sub, &out);
                Ok(out)
            };
            let noisy = run(cfg.noise)?;
            let plain = run(None)?;
            rows.push(NoiseComparisonRow {
                seed,
                final_train_acc_noise: last(&noisy, |e| e.train_acc),
                final_train_acc_plain: last(&plain, |e| e.train_acc),
                final_train_loss_noise: last(&noisy, |e| e.train_loss),
                final_train_loss_plain: last(&plain, |e| e.train_loss),
                divergence_noise: noisy.divergence.as_str().into(),
                divergence_plain: plain.divergence.as_str().into(),
            });
        }
        files.push(output::write_noise_comparison(&cfg.out_dir, &rows)?);
        comparison = Some(rows);
    }

    let mut summary = base_summary(cfg, &outcome, &train_set, val_set.as_ref(), start);
    summary.noise_comparison = comparison;
    finish(cfg, summary, files)
}

/// `analyze` and `regularization`: an instrumented training run.
pub fn cmd_analyze(cfg: &ResolvedConfig) -> Result<Summary, CliError> {
    let start = Instant::now();
    let (train_set, val_set) = load_data(cfg)?;
    let mut model = build_model(cfg, &train_set)?;
    output::ensure_dir(&cfg.out_dir)?;
    let acfg = cfg.analysis.clone().unwrap_or_default();
    let (series, outcome): (AnalysisSeries, TrainOutcome) =
        run_analysis(&mut model, &train_set, val_set.as_ref(), &cfg.train_config(), &acfg)?;
    progress(cfg, &outcome);

    let files = vec![
        output::write_metrics(&cfg.out_dir, model.lambdas().len(), &outcome.epochs)?,
        output::write_landscape(&cfg.out_dir, &series)?,
        output::write_gradpred(&cfg.out_dir, &series)?,
        {
            let ck = cfg.out_dir.join(output::CHECKPOINT_FILE);
            checkpoint::save(&model, &ck)?;
            ck
        },
    ];
    let mut summary = base_summary(cfg, &outcome, &train_set, val_set.as_ref(), start);
    summary.landscape_samples = Some(series.landscape.len());
    summary.gradpred_samples = Some(series.gradpred.len());
    finish(cfg, summary, files)
}

fn finish(cfg: &ResolvedConfig, mut summary: Summary, mut files: Vec<PathBuf>) -> Result<Summary, CliError> {
    let path = cfg.out_dir.join(output::SUMMARY_FILE);
    files.push(path.clone());
    summary.files = files;
    output::write_json(&path, &summary)?;
    Ok(summary)
}

/// Runs the finite-difference suite; any case above tolerance is a
/// verification failure.
pub fn cmd_gradcheck(cfg: &ResolvedConfig) -> Result<Vec<(String, f64)>, CliError> {
    let start = Instant::now();
    let g = cfg.gradcheck.clone().unwrap_or_default();
    let seed = g.seed.wrapping_add(cfg.seed);
    let cases = standard_suite(seed);
    for name in &g.corrupt {
        if !cases.iter().any(|c| &c.name == name) {
            return Err(CliError::Input(format!("unknown gradcheck case `{name}`")));
        }
    }
    let report = run_suite(&cases, DEFAULT_TOLERANCE, &g.corrupt)?;
    let per_case = report.per_case();
    for (case, err) in &per_case {
        let verdict = if *err <= report.tolerance { "ok" } else { "FAIL" };
        println!("{case:<28} max_rel_error {err:.3e} {verdict}");
    }
    output::ensure_dir(&cfg.out_dir)?;
    output::write_gradcheck(&cfg.out_dir, &report)?;
    output::write_json(
        &cfg.out_dir.join(output::SUMMARY_FILE),
        &GradcheckSummary {
            command: cfg.experiment,
            seed,
            tolerance: report.tolerance,
            passed: report.passed(),
            wall_time_secs: start.elapsed().as_secs_f64(),
            cases: per_case.clone(),
            config: cfg,
        },
    )?;
    if !report.passed() {
        let bad: Vec<String> = report
            .failures()
            .map(|f| format!("{}.{} ({:.3e})", f.case, f.tensor, f.max_rel_error))
            .collect();
        return Err(CliError::Verification(format!(
            "gradient check exceeded {} in: {}",
            report.tolerance,
            bad.join(", ")
        )));
    }
    Ok(per_case)
}
