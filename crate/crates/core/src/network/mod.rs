//! A small convolutional classifier with hand-derived backward passes.

mod conv;
mod layers;
mod optim;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{Mode, NormCache, NormLayer, NormVariant};
use crate::tensor::{Shape4, Tensor4};

pub use conv::{Conv3x3, ConvCache};
pub use layers::{
    argmax_rows, cross_entropy, global_avg_pool_backward, global_avg_pool_forward, noise_inject,
    relu_backward, relu_forward, Linear,
};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, Optimizer, ParamSlots, ScheduleStep};
pub use train::{
    batch_scaled_lr, evaluate, train, train_observed, Divergence, DivergenceThresholds,
    EpochMetrics, NoopObserver, StepInfo, StepObserver, TrainConfig, TrainOutcome,
};

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Norm {
        variant: NormVariant,
        groups: usize,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    NoiseHook {
        mu: f64,
        sigma: f64,
    },
}

/// Optional additive noise after every normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mu: f64,
    pub sigma: f64,
}

/// The desk-scale network: three conv/norm/relu stages (the second one
/// downsampling), global average pooling and a linear classifier.
/// `width` is the channel count of the first stage; later stages use twice
/// that.
pub fn micro_cnn(
    in_channels: usize,
    classes: usize,
    width: usize,
    variant: NormVariant,
    groups: usize,
    noise: Option<NoiseSpec>,
) -> Vec<LayerSpec> {
    let stages = [(in_channels, width, 1), (width, 2 * width, 2), (2 * width, 2 * width, 1)];
    let mut specs = Vec::new();
    for (i, o, stride) in stages {
        specs.push(LayerSpec::Conv3x3 {
            in_channels: i,
            out_channels: o,
            stride,
        });
        specs.push(LayerSpec::Norm { variant, groups });
        if let Some(n) = noise {
            specs.push(LayerSpec::NoiseHook {
                mu: n.mu,
                sigma: n.sigma,
            });
        }
        specs.push(LayerSpec::Relu);
    }
    specs.push(LayerSpec::GlobalAvgPool);
    specs.push(LayerSpec::Linear {
        in_features: 2 * width,
        out_features: classes,
    });
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv3x3),
    Norm(NormLayer),
    Relu,
    GlobalAvgPool,
    Linear(Linear),
    Noise { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv(ConvCache),
    Norm(NormCache),
    Relu(Tensor4),
    Pool(Shape4),
    Linear(Tensor4),
    Noise,
}

/// How a parameter tensor participates in weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Gate,
}

impl ParamKind {
    pub fn is_norm_param(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift | ParamKind::Gate)
    }
}

/// Parameter gradients, one vector per parameter tensor in the model's
/// canonical order (layer order; weight before bias; γ, β, λ).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Where a forward pass gets its statistics and whether it may mutate state.
pub enum Pass<'a> {
    /// Batch statistics, running averages updated, noise hooks drawing from
    /// the given generator (or inactive when `None`).
    Train(Option<&'a mut ChaCha8Rng>),
    /// Batch statistics; nothing mutated, noise hooks inactive.
    Probe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub specs: Vec<LayerSpec>,
    pub input_channels: usize,
    pub classes: usize,
}

impl Model {
    /// Validates the layer sequence and initializes weights from `seed`
    /// (He-normal convolutions, uniform linear layer, zero biases).
    pub fn build(specs: &[LayerSpec], input_channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = input_channels;
        let mut pooled = false;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv3x3 {
                    in_channels,
                    out_channels,
                    stride,
                } => {
                    if pooled || in_channels != channels {
                        return Err(incompatible(i, spec, channels));
                    }
                    let mut conv = Conv3x3::new(in_channels, out_channels, stride)?;
                    let std = (2.0 / (9 * in_channels) as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("positive std");
                    conv.weight.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
                    channels = out_channels;
                    Layer::Conv(conv)
                }
                LayerSpec::Norm { variant, groups } => {
                    if pooled {
                        return Err(incompatible(i, spec, channels));
                    }
                    Layer::Norm(NormLayer::new(variant, channels, groups)?)
                }
                LayerSpec::NoiseHook { mu, sigma } => {
                    if !matches!(layers.last(), Some(Layer::Norm(_))) {
                        return Err(Error::config(format!(
                            "layer {i}: noise hook must directly follow a normalization layer"
                        )));
                    }
                    if !(sigma >= 0.0) || !mu.is_finite() || !sigma.is_finite() {
                        return Err(Error::config(format!(
                            "layer {i}: invalid noise parameters mu={mu} sigma={sigma}"
                        )));
                    }
                    Layer::Noise { mu, sigma }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::GlobalAvgPool => {
                    pooled = true;
                    Layer::GlobalAvgPool
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if !pooled || in_features != channels {
                        return Err(incompatible(i, spec, channels));
                    }
                    let mut lin = Linear::new(in_features, out_features)?;
                    let bound = 1.0 / (in_features as f64).sqrt();
                    lin.weight
                        .iter_mut()
                        .for_each(|w| *w = rng.gen_range(-bound..bound));
                    channels = out_features;
                    Layer::Linear(lin)
                }
            };
            layers.push(layer);
        }
        if !pooled || !matches!(layers.last(), Some(Layer::Linear(_))) {
            return Err(Error::config(
                "model must end with global_avg_pool followed by linear layers",
            ));
        }
        if channels < 2 {
            return Err(Error::config("classifier needs at least 2 outputs"));
        }
        Ok(Self {
            layers,
            specs: specs.to_vec(),
            input_channels,
            classes: channels,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for l in &mut self.layers {
            if let Layer::Norm(n) = l {
                n.set_mode(mode);
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor4, pass: Pass<'_>) -> Result<(Tensor4, Vec<LayerCache>)> {
        match pass {
            Pass::Probe => self.forward_frozen(x),
            Pass::Train(mut rng) => {
                let mut caches = Vec::with_capacity(self.layers.len());
                let mut cur = x.clone();
                for layer in &mut self.layers {
                    let (y, cache) = match layer {
                        Layer::Norm(n) => {
                            let (y, c) = n.forward(&cur)?;
                            (y, LayerCache::Norm(c))
                        }
                        Layer::Noise { mu, sigma } => match rng.as_deref_mut() {
                            Some(r) => (noise_inject(&cur, *mu, *sigma, r)?, LayerCache::Noise),
                            None => (cur.clone(), LayerCache::Noise),
                        },
                        other => stateless_forward(other, &cur)?,
                    };
                    caches.push(cache);
                    cur = y;
                }
                Ok((cur, caches))
            }
        }
    }

    /// Forward pass that mutates nothing: batch-norm layers use the mode
    /// stored in their state without updating running averages, and noise
    /// hooks are inactive.
    pub fn forward_frozen(&self, x: &Tensor4) -> Result<(Tensor4, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Norm(n) => {
                    let (y, c) = n.forward_frozen(&cur)?;
                    (y, LayerCache::Norm(c))
                }
                Layer::Noise { .. } => (cur.clone(), LayerCache::Noise),
                other => stateless_forward(other, &cur)?,
            };
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    pub fn backward(&self, caches: &[LayerCache], dlogits: &Tensor4) -> Result<Gradients> {
        if caches.len() != self.layers.len() {
            return Err(Error::Usage("cache list does not match the model".into()));
        }
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        let mut grad = dlogits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            grad = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(cc)) => {
                    let (dx, dw, db) = c.backward(cc, &grad)?;
                    per_layer[i] = vec![dw, db];
                    dx
                }
                (Layer::Norm(n), LayerCache::Norm(nc)) => {
                    let g = n.backward(nc, &grad)?;
                    per_layer[i] = vec![g.dgamma, g.dbeta];
                    if let Some(dl) = g.dlambda {
                        per_layer[i].push(vec![dl]);
                    }
                    g.dx
                }
                (Layer::Relu, LayerCache::Relu(x)) => relu_backward(x, &grad)?,
                (Layer::GlobalAvgPool, LayerCache::Pool(s)) => global_avg_pool_backward(*s, &grad)?,
                (Layer::Linear(l), LayerCache::Linear(x)) => {
                    let (dx, dw, db) = l.backward(x, &grad)?;
                    per_layer[i] = vec![dw, db];
                    dx
                }
                (Layer::Noise { .. }, LayerCache::Noise) => grad,
                _ => return Err(Error::Usage(format!("layer {i}: cache kind mismatch"))),
            };
        }
        Ok(Gradients {
            tensors: per_layer.into_iter().flatten().collect(),
        })
    }

    /// Visits every parameter tensor in canonical order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, ParamKind, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    f(&format!("layer{i}.conv.weight"), ParamKind::Weight, &c.weight);
                    f(&format!("layer{i}.conv.bias"), ParamKind::Bias, &c.bias);
                }
                Layer::Linear(l) => {
                    f(&format!("layer{i}.linear.weight"), ParamKind::Weight, &l.weight);
                    f(&format!("layer{i}.linear.bias"), ParamKind::Bias, &l.bias);
                }
                Layer::Norm(n) => {
                    let a = n.affine();
                    f(&format!("layer{i}.norm.gamma"), ParamKind::NormScale, &a.gamma);
                    f(&format!("layer{i}.norm.beta"), ParamKind::NormShift, &a.beta);
                    if let Some(l) = n.lambda() {
                        f(&format!("layer{i}.norm.lambda"), ParamKind::Gate, &[l]);
                    }
                }
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKind, &mut [f64])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    f(ParamKind::Weight, &mut c.weight);
                    f(ParamKind::Bias, &mut c.bias);
                }
                Layer::Linear(l) => {
                    f(ParamKind::Weight, &mut l.weight);
                    f(ParamKind::Bias, &mut l.bias);
                }
                Layer::Norm(n) => {
                    let a = n.affine_mut();
                    f(ParamKind::NormScale, &mut a.gamma);
                    f(ParamKind::NormShift, &mut a.beta);
                    if let Some(l) = n.lambda_mut() {
                        f(ParamKind::Gate, std::slice::from_mut(l));
                    }
                }
                _ => {}
            }
        }
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut kinds = Vec::new();
        self.visit_params(|_, k, _| kinds.push(k));
        kinds
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(|_, _, p| out.extend_from_slice(p));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = {
            let mut t = 0;
            self.visit_params(|_, _, p| t += p.len());
            t
        };
        if flat.len() != total {
            return Err(Error::Usage(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_params_mut(|_, p| {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        });
        Ok(())
    }

    /// Gate parameters of every GNPlus layer, in layer order.
    pub fn lambdas(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Norm(n) => n.lambda(),
                _ => None,
            })
            .collect()
    }

    /// Loss, number of correct predictions and parameter gradients for one
    /// batch.
    pub fn loss_and_grad(
        &mut self,
        x: &Tensor4,
        labels: &[usize],
        pass: Pass<'_>,
    ) -> Result<(f64, usize, Gradients)> {
        let (logits, caches) = self.forward(x, pass)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        let correct = count_correct(&logits, labels);
        let grads = self.backward(&caches, &dlogits)?;
        Ok((loss, correct, grads))
    }

    /// Loss on a batch without mutating anything.
    pub fn probe_loss(&self, x: &Tensor4, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward_frozen(x)?;
        Ok(cross_entropy(&logits, labels)?.0)
    }
}

pub(crate) fn count_correct(logits: &Tensor4, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

fn stateless_forward(layer: &Layer, x: &Tensor4) -> Result<(Tensor4, LayerCache)> {
    Ok(match layer {
        Layer::Conv(c) => {
            let (y, cache) = c.forward(x)?;
            (y, LayerCache::Conv(cache))
        }
        Layer::Relu => (relu_forward(x), LayerCache::Relu(x.clone())),
        Layer::GlobalAvgPool => (global_avg_pool_forward(x)?, LayerCache::Pool(x.shape())),
        Layer::Linear(l) => (l.forward(x)?, LayerCache::Linear(x.clone())),
        Layer::Norm(_) | Layer::Noise { .. } => unreachable!("stateful layers handled by caller"),
    })
}

fn incompatible(i: usize, spec: &LayerSpec, channels: usize) -> Error {
    Error::config(format!(
        "layer {i} ({spec:?}) is incompatible with the preceding output of {channels} channels"
    ))
}
