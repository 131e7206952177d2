use serde::{Deserialize, Serialize};

use super::{Gradients, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub const fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// From `epoch` onward the learning rate is multiplied by `multiplier`;
/// multipliers of earlier steps compound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay to γ, β and λ as well.
    pub decay_norm_params: bool,
    pub schedule: Vec<ScheduleStep>,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is accepted so a run can be checked for parameter stability.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self
            .schedule
            .windows(2)
            .any(|w| w[1].epoch <= w[0].epoch)
        {
            return Err(Error::config("schedule epochs must be strictly increasing"));
        }
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::config("momentum must lie in [0, 1)"))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::config("Adam needs beta1, beta2 in [0, 1) and eps > 0"))
            }
            _ => Ok(()),
        }
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|s| epoch >= s.epoch)
            .fold(self.lr, |lr, s| lr * s.multiplier)
    }
}

/// Optimizer state for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSlots {
    /// Momentum buffer (SGD) or first moment (Adam).
    pub first: Vec<f64>,
    /// Second moment (Adam only).
    pub second: Vec<f64>,
}

/// One update of a single parameter tensor. `step_count` is 1-based and
/// drives Adam's bias correction. Weight decay is the coupled L2 form: the
/// term `weight_decay·θ` is added to the gradient.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    slots: &mut ParamSlots,
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step_count: u64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Usage(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if slots.first.len() != params.len() {
        slots.first = vec![0.0; params.len()];
    }
    match kind {
        OptimizerKind::SgdMomentum { momentum } => {
            for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut slots.first) {
                let g = g + weight_decay * *p;
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            if slots.second.len() != params.len() {
                slots.second = vec![0.0; params.len()];
            }
            let t = step_count.max(1) as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, &g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(&mut slots.first)
                .zip(&mut slots.second)
            {
                let g = g + weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Applies [`optimizer_step`] across every parameter tensor of a model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    slots: Vec<ParamSlots>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            slots: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = vec![ParamSlots::default(); grads.tensors.len()];
        }
        if self.slots.len() != grads.tensors.len() {
            return Err(Error::Usage("gradient layout changed between steps".into()));
        }
        self.steps += 1;
        let cfg = &self.config;
        let mut idx = 0;
        let mut result = Ok(());
        let slots = &mut self.slots;
        let steps = self.steps;
        model.visit_params_mut(|kind, params| {
            if result.is_err() {
                return;
            }
            let wd = if kind.is_norm_param() && !cfg.decay_norm_params {
                0.0
            } else {
                cfg.weight_decay
            };
            result = optimizer_step(
                params,
                &grads.tensors[idx],
                &mut slots[idx],
                cfg.kind,
                lr,
                wd,
                steps,
            );
            idx += 1;
        });
        result
    }
}
