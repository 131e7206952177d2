//! Training-dynamics instrumentation.
//!
//! At each probed step the current parameters are moved along the freshly
//! computed gradient by every step size of a small grid and the loss is
//! re-evaluated on the same batch (the loss landscape). Separately, the ℓ2
//! distance between consecutive steps' gradients is recorded (gradient
//! predictiveness). Probing works on copies and never perturbs training.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, LabeledImageSet};
use crate::error::{Error, Result};
use crate::network::{train_observed, Gradients, Model, StepInfo, StepObserver, TrainConfig, TrainOutcome};

/// Default probe distances: 1e-4 to 5e-4 in steps of 1e-4.
pub const DEFAULT_ETA_GRID: [f64; 5] = [1e-4, 2e-4, 3e-4, 4e-4, 5e-4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    /// Probe every step size on copies of one training run.
    #[default]
    PerStep,
    /// Train one run per step size (used as that run's learning rate) and
    /// compare their per-step losses.
    SeparateRuns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub eta_grid: Vec<f64>,
    /// Probe at steps divisible by this interval; `None` disables probing.
    pub probe_every: Option<u64>,
    pub mode: AnalysisMode,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            eta_grid: DEFAULT_ETA_GRID.to_vec(),
            probe_every: Some(1),
            mode: AnalysisMode::PerStep,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta_grid.is_empty() {
            return Err(Error::config("eta grid is empty"));
        }
        if self.eta_grid.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::config("eta grid values must be positive and finite"));
        }
        if self.eta_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("eta grid must be strictly ascending"));
        }
        if self.probe_every == Some(0) {
            return Err(Error::config("probe interval must be at least 1"));
        }
        Ok(())
    }

    fn probes(&self, step: u64) -> bool {
        self.probe_every.is_some_and(|k| step.is_multiple_of(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSample {
    pub step: u64,
    pub etas: Vec<f64>,
    /// Loss per eta; non-finite values are stored as `+∞`.
    pub losses: Vec<f64>,
    pub loss_min: f64,
    pub loss_max: f64,
    /// Set when any probe produced a non-finite loss.
    pub non_finite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradPredSample {
    pub step: u64,
    pub l2_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSeries {
    pub landscape: Vec<LandscapeSample>,
    pub gradpred: Vec<GradPredSample>,
}

/// Evaluates `loss_at(θ − η·g)` for each `η`.
pub fn landscape_probe(
    step: u64,
    theta: &[f64],
    grad: &[f64],
    etas: &[f64],
    mut loss_at: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<LandscapeSample> {
    if theta.len() != grad.len() {
        return Err(Error::Usage(format!(
            "{} parameters but {} gradient entries",
            theta.len(),
            grad.len()
        )));
    }
    let mut losses = Vec::with_capacity(etas.len());
    let mut moved = vec![0.0; theta.len()];
    for &eta in etas {
        for ((m, &p), &g) in moved.iter_mut().zip(theta).zip(grad) {
            *m = p - eta * g;
        }
        losses.push(loss_at(&moved)?);
    }
    Ok(summarize(step, etas.to_vec(), losses))
}

fn summarize(step: u64, etas: Vec<f64>, mut losses: Vec<f64>) -> LandscapeSample {
    let mut non_finite = false;
    for l in &mut losses {
        if !l.is_finite() {
            *l = f64::INFINITY;
            non_finite = true;
        }
    }
    let loss_min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let loss_max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    LandscapeSample {
        step,
        etas,
        losses,
        loss_min,
        loss_max,
        non_finite,
    }
}

/// Landscape probe of a network on one batch. Batch statistics are used,
/// running averages and noise hooks are left alone.
pub fn model_landscape_probe(
    step: u64,
    model: &Model,
    grads: &Gradients,
    batch: &Batch,
    etas: &[f64],
) -> Result<LandscapeSample> {
    let theta = model.flat_params();
    let g = grads.flatten();
    let mut scratch = model.clone();
    landscape_probe(step, &theta, &g, etas, |p| {
        scratch.set_flat_params(p)?;
        scratch.probe_loss(&batch.images, &batch.labels)
    })
}

/// Euclidean distance between two flattened gradients.
pub fn gradient_predictiveness(current: &[f64], previous: &[f64]) -> Result<f64> {
    if current.len() != previous.len() {
        return Err(Error::Usage(format!(
            "gradient lengths differ: {} vs {}",
            current.len(),
            previous.len()
        )));
    }
    Ok(current
        .iter()
        .zip(previous)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Step observer that records both series.
pub struct AnalysisObserver {
    cfg: AnalysisConfig,
    prev_grad: Option<Vec<f64>>,
    pub series: AnalysisSeries,
}

impl AnalysisObserver {
    pub fn new(cfg: AnalysisConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prev_grad: None,
            series: AnalysisSeries::default(),
        })
    }
}

impl StepObserver for AnalysisObserver {
    fn on_step(&mut self, info: &StepInfo<'_>) -> Result<()> {
        if self.cfg.probe_every.is_none() {
            return Ok(());
        }
        let flat = info.grads.flatten();
        if self.cfg.probes(info.step) {
            self.series.landscape.push(model_landscape_probe(
                info.step,
                info.model,
                info.grads,
                info.batch,
                &self.cfg.eta_grid,
            )?);
            if let Some(prev) = &self.prev_grad {
                self.series.gradpred.push(GradPredSample {
                    step: info.step,
                    l2_distance: gradient_predictiveness(&flat, prev)?,
                });
            }
        }
        self.prev_grad = Some(flat);
        Ok(())
    }
}

/// A training run instrumented with the landscape and predictiveness
/// probes.
pub fn run_analysis(
    model: &mut Model,
    train_set: &LabeledImageSet,
    val_set: Option<&LabeledImageSet>,
    train_cfg: &TrainConfig,
    analysis_cfg: &AnalysisConfig,
) -> Result<(AnalysisSeries, TrainOutcome)> {
    match analysis_cfg.mode {
        AnalysisMode::PerStep => {
            let mut obs = AnalysisObserver::new(analysis_cfg.clone())?;
            let outcome = train_observed(model, train_set, val_set, train_cfg, &mut obs)?;
            Ok((obs.series, outcome))
        }
        AnalysisMode::SeparateRuns => {
            run_separate(model, train_set, val_set, train_cfg, analysis_cfg)
        }
    }
}

#[derive(Default)]
struct LossTrace {
    losses: Vec<(u64, f64)>,
    prev_grad: Option<Vec<f64>>,
    distances: Vec<(u64, f64)>,
}

impl StepObserver for LossTrace {
    fn on_step(&mut self, info: &StepInfo<'_>) -> Result<()> {
        let flat = info.grads.flatten();
        if let Some(prev) = &self.prev_grad {
            self.distances
                .push((info.step, gradient_predictiveness(&flat, prev)?));
        }
        self.prev_grad = Some(flat);
        self.losses.push((info.step, info.loss));
        Ok(())
    }
}

/// One independent run per grid value, each using that value as its
/// learning rate. The landscape sample at step `t` lists every run's
/// training loss at `t` (`+∞` once a run has stopped); predictiveness is the
/// mean over the runs that reached `t`. The returned outcome and final
/// `model` belong to the first run.
fn run_separate(
    model: &mut Model,
    train_set: &LabeledImageSet,
    val_set: Option<&LabeledImageSet>,
    train_cfg: &TrainConfig,
    analysis_cfg: &AnalysisConfig,
) -> Result<(AnalysisSeries, TrainOutcome)> {
    analysis_cfg.validate()?;
    let initial = model.clone();
    let mut traces = Vec::new();
    let mut first: Option<(Model, TrainOutcome)> = None;
    for &eta in &analysis_cfg.eta_grid {
        let mut run_model = initial.clone();
        let mut cfg = train_cfg.clone();
        cfg.optimizer.lr = eta;
        let mut trace = LossTrace::default();
        let outcome = train_observed(&mut run_model, train_set, val_set, &cfg, &mut trace)?;
        if first.is_none() {
            first = Some((run_model, outcome));
        }
        traces.push(trace);
    }
    let max_step = traces
        .iter()
        .filter_map(|t| t.losses.last().map(|l| l.0))
        .max()
        .unwrap_or(0);
    let mut series = AnalysisSeries::default();
    for step in 1..=max_step {
        if !analysis_cfg.probes(step) {
            continue;
        }
        let losses = traces
            .iter()
            .map(|t| {
                t.losses
                    .get(step as usize - 1)
                    .map_or(f64::INFINITY, |l| l.1)
            })
            .collect();
        series
            .landscape
            .push(summarize(step, analysis_cfg.eta_grid.clone(), losses));
        let ds: Vec<f64> = traces
            .iter()
            .filter_map(|t| t.distances.get((step as usize).checked_sub(2)?).map(|d| d.1))
            .collect();
        if !ds.is_empty() {
            series.gradpred.push(GradPredSample {
                step,
                l2_distance: ds.iter().sum::<f64>() / ds.len() as f64,
            });
        }
    }
    let (run_model, outcome) = first.expect("grid is non-empty");
    *model = run_model;
    Ok((series, outcome))
}
