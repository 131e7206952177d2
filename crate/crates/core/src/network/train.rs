use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{count_correct, cross_entropy, Gradients, Model, Optimizer, OptimizerConfig, Pass};
use crate::data::{batch_iterator, Augment, Batch, BatchMode, LabeledImageSet};
use crate::error::{Error, Result};
use crate::norm::Mode;

/// Learning rate scaled linearly with batch size, 0.1 at batch 128.
pub fn batch_scaled_lr(batch_size: usize) -> f64 {
    1e-1 * (batch_size as f64 / 128.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    None,
    GradientVanish,
    GradientExplode,
}

impl Divergence {
    pub fn as_str(self) -> &'static str {
        match self {
            Divergence::None => "none",
            Divergence::GradientVanish => "gradient_vanish",
            Divergence::GradientExplode => "gradient_explode",
        }
    }

    pub fn is_diverged(self) -> bool {
        self != Divergence::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceThresholds {
    /// A loss above this (or non-finite) stops training at once.
    pub max_loss: f64,
    pub explode_grad_norm: f64,
    pub vanish_grad_norm: f64,
    /// Consecutive steps a gradient-norm bound must be violated.
    pub patience: usize,
}

impl Default for DivergenceThresholds {
    fn default() -> Self {
        Self {
            max_loss: 1e4,
            explode_grad_norm: 1e6,
            vanish_grad_norm: 1e-12,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub thresholds: DivergenceThresholds,
    pub augment: Augment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// `None` when the epoch diverged before a single step completed.
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    /// `None` without a validation set or after divergence.
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lambdas: Vec<f64>,
    pub divergence: Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub divergence: Divergence,
    pub final_lambdas: Vec<f64>,
    pub steps: u64,
}

/// What an observer sees once per optimizer step: the model before the
/// update, the gradient just computed and the batch it came from.
pub struct StepInfo<'a> {
    /// 1-based global step index.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub model: &'a Model,
    pub grads: &'a Gradients,
    pub batch: &'a Batch,
}

pub trait StepObserver {
    fn on_step(&mut self, info: &StepInfo<'_>) -> Result<()>;
}

pub struct NoopObserver;

impl StepObserver for NoopObserver {
    fn on_step(&mut self, _: &StepInfo<'_>) -> Result<()> {
        Ok(())
    }
}

pub fn train(
    model: &mut Model,
    train_set: &LabeledImageSet,
    val_set: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(model, train_set, val_set, cfg, &mut NoopObserver)
}

// Independent streams so that e.g. enabling noise does not change the data
// order.
const NOISE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 of (seed, epoch)
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train_observed(
    model: &mut Model,
    train_set: &LabeledImageSet,
    val_set: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if cfg.batch_size == 0 || train_set.len() < cfg.batch_size {
        return Err(Error::Input(format!(
            "training set of {} samples cannot fill a batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_rng.set_stream(AUGMENT_STREAM);

    model.set_mode(Mode::Train);
    let th = cfg.thresholds;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut divergence = Divergence::None;
    let mut step: u64 = 0;
    let (mut explode_run, mut vanish_run) = (0usize, 0usize);

    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at_epoch(epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let batches = batch_iterator(
            train_set,
            cfg.batch_size,
            Some(epoch_shuffle_seed(cfg.seed, epoch)),
            BatchMode::Train,
        )?;
        for mut batch in batches {
            cfg.augment.apply(&mut batch.images, &mut augment_rng);
            let (logits, caches) = model.forward(&batch.images, Pass::Train(Some(&mut noise_rng)))?;
            let (loss, dlogits) = cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() || loss.abs() > th.max_loss {
                divergence = Divergence::GradientExplode;
                break;
            }
            let grads = model.backward(&caches, &dlogits)?;
            let norm = grads.l2_norm();
            if !norm.is_finite() {
                divergence = Divergence::GradientExplode;
                break;
            }
            explode_run = if norm > th.explode_grad_norm { explode_run + 1 } else { 0 };
            vanish_run = if norm < th.vanish_grad_norm { vanish_run + 1 } else { 0 };
            if explode_run >= th.patience {
                divergence = Divergence::GradientExplode;
                break;
            }
            if vanish_run >= th.patience {
                divergence = Divergence::GradientVanish;
                break;
            }
            step += 1;
            observer.on_step(&StepInfo {
                step,
                epoch,
                lr,
                loss,
                model,
                grads: &grads,
                batch: &batch,
            })?;
            optimizer.step(model, &grads, lr)?;
            let n = batch.labels.len();
            loss_sum += loss * n as f64;
            correct += count_correct(&logits, &batch.labels);
            seen += n;
        }
        let (train_loss, train_acc) = if seen > 0 {
            (Some(loss_sum / seen as f64), Some(correct as f64 / seen as f64))
        } else {
            (None, None)
        };
        let (val_loss, val_acc) = match (val_set, divergence) {
            (Some(v), Divergence::None) => {
                let (l, a) = evaluate(model, v, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lambdas: model.lambdas(),
            divergence,
        });
        if divergence.is_diverged() {
            break;
        }
    }
    Ok(TrainOutcome {
        epochs,
        divergence,
        final_lambdas: model.lambdas(),
        steps: step,
    })
}

/// Mean loss and accuracy over the whole set in eval mode (running
/// statistics, no noise). The model itself is not modified.
pub fn evaluate(model: &Model, set: &LabeledImageSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut eval_model = model.clone();
    eval_model.set_mode(Mode::Eval);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in batch_iterator(set, batch_size, None, BatchMode::Eval)? {
        let (logits, _) = eval_model.forward_frozen(&batch.images)?;
        let (loss, _) = cross_entropy(&logits, &batch.labels)?;
        loss_sum += loss * batch.labels.len() as f64;
        correct += count_correct(&logits, &batch.labels);
    }
    let n = set.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}
