//! Batch normalization, group normalization and the gated GNPlus layers.
//!
//! The free functions (`bn_normalize`, `gn_normalize`, `gnplus_forward` and
//! their backward counterparts) are the pure-normalization building blocks.
//! [`NormLayer`] wraps them with per-channel affine parameters so a network
//! can hold any of the five variants behind one type.

mod batch;
mod gnplus;
mod group;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use batch::{bn_backward, bn_normalize, bn_normalize_frozen, BatchNormState, BnCache};
pub use gnplus::{
    gnplus_backward, gnplus_forward, gnplus_forward_frozen, GnPlusCache, GnPlusGrads,
    GnPlusState, GnPlusVariant,
};
pub use group::{gn_backward, gn_normalize, GnCache, GroupNormConfig};

/// Default numerical floor added to variances.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default running-statistics momentum for batch normalization.
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Logistic sigmoid, evaluated without overflow for any finite input.
pub fn sigmoid_gate(lambda: f64) -> f64 {
    if lambda >= 0.0 {
        1.0 / (1.0 + (-lambda).exp())
    } else {
        let e = lambda.exp();
        e / (1.0 + e)
    }
}

/// Per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn apply(&self, z: &Tensor4) -> Result<Tensor4> {
        self.check(z)?;
        let s = z.shape();
        let p = s.plane();
        let mut y = z.clone();
        for (i, chunk) in y.data_mut().chunks_mut(p).enumerate() {
            let c = i % s.c;
            let (g, b) = (self.gamma[c], self.beta[c]);
            for v in chunk {
                *v = g * *v + b;
            }
        }
        Ok(y)
    }

    /// Returns `(dz, dgamma, dbeta)` for `y = gamma·z + beta`.
    pub fn backward(&self, z: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
        self.check(z)?;
        z.ensure_same_shape(dy)?;
        let s = z.shape();
        let p = s.plane();
        let mut dz = dy.clone();
        let mut dgamma = vec![0.0; s.c];
        let mut dbeta = vec![0.0; s.c];
        for (i, (dzc, zc)) in dz
            .data_mut()
            .chunks_mut(p)
            .zip(z.data().chunks(p))
            .enumerate()
        {
            let c = i % s.c;
            let g = self.gamma[c];
            for (d, &zv) in dzc.iter_mut().zip(zc) {
                dgamma[c] += *d * zv;
                dbeta[c] += *d;
                *d *= g;
            }
        }
        Ok((dz, dgamma, dbeta))
    }

    fn check(&self, z: &Tensor4) -> Result<()> {
        if self.gamma.len() != z.shape().c || self.beta.len() != z.shape().c {
            return Err(Error::shape(format!(
                "affine has {} channels, input {}",
                self.gamma.len(),
                z.shape()
            )));
        }
        Ok(())
    }
}

/// The five normalization choices a network layer can use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormVariant {
    #[serde(rename = "bn")]
    Batch,
    #[serde(rename = "gn")]
    Group,
    #[serde(rename = "gnplus_gn_first")]
    GnPlusGnFirst,
    #[serde(rename = "gnplus_bn_first")]
    GnPlusBnFirst,
    #[serde(rename = "gnplus_parallel")]
    GnPlusParallel,
}

impl NormVariant {
    pub const ALL: [NormVariant; 5] = [
        NormVariant::Batch,
        NormVariant::Group,
        NormVariant::GnPlusGnFirst,
        NormVariant::GnPlusBnFirst,
        NormVariant::GnPlusParallel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormVariant::Batch => "bn",
            NormVariant::Group => "gn",
            NormVariant::GnPlusGnFirst => "gnplus_gn_first",
            NormVariant::GnPlusBnFirst => "gnplus_bn_first",
            NormVariant::GnPlusParallel => "gnplus_parallel",
        }
    }

    pub fn gnplus(self) -> Option<GnPlusVariant> {
        match self {
            NormVariant::GnPlusGnFirst => Some(GnPlusVariant::GnFirst),
            NormVariant::GnPlusBnFirst => Some(GnPlusVariant::BnFirst),
            NormVariant::GnPlusParallel => Some(GnPlusVariant::Parallel),
            _ => None,
        }
    }

    pub fn uses_groups(self) -> bool {
        self != NormVariant::Batch
    }
}

impl fmt::Display for NormVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown normalization variant `{s}`")))
    }
}

/// A normalization layer with its learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum NormLayer {
    Batch {
        bn: BatchNormState,
        affine: AffineParams,
    },
    Group {
        gn: GroupNormConfig,
        affine: AffineParams,
    },
    GnPlus(GnPlusState),
}

#[derive(Debug, Clone)]
pub enum NormCache {
    Batch { bn: BnCache, z: Tensor4 },
    Group { gn: GnCache, z: Tensor4 },
    GnPlus(Box<GnPlusCache>),
}

#[derive(Debug, Clone)]
pub struct NormGrads {
    pub dx: Tensor4,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dlambda: Option<f64>,
}

impl NormLayer {
    pub fn new(variant: NormVariant, channels: usize, groups: usize) -> Result<Self> {
        let gn = GroupNormConfig::new(groups)?;
        if variant.uses_groups() {
            gn.check_channels(channels)?;
        }
        Ok(match variant.gnplus() {
            Some(v) => NormLayer::GnPlus(GnPlusState::new(v, channels, gn)),
            None if variant == NormVariant::Batch => NormLayer::Batch {
                bn: BatchNormState::new(channels),
                affine: AffineParams::new(channels),
            },
            None => NormLayer::Group {
                gn,
                affine: AffineParams::new(channels),
            },
        })
    }

    pub fn variant(&self) -> NormVariant {
        match self {
            NormLayer::Batch { .. } => NormVariant::Batch,
            NormLayer::Group { .. } => NormVariant::Group,
            NormLayer::GnPlus(s) => match s.variant {
                GnPlusVariant::GnFirst => NormVariant::GnPlusGnFirst,
                GnPlusVariant::BnFirst => NormVariant::GnPlusBnFirst,
                GnPlusVariant::Parallel => NormVariant::GnPlusParallel,
            },
        }
    }

    pub fn affine(&self) -> &AffineParams {
        match self {
            NormLayer::Batch { affine, .. } | NormLayer::Group { affine, .. } => affine,
            NormLayer::GnPlus(s) => &s.affine,
        }
    }

    pub fn affine_mut(&mut self) -> &mut AffineParams {
        match self {
            NormLayer::Batch { affine, .. } | NormLayer::Group { affine, .. } => affine,
            NormLayer::GnPlus(s) => &mut s.affine,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            NormLayer::GnPlus(s) => Some(s.lambda),
            _ => None,
        }
    }

    pub fn lambda_mut(&mut self) -> Option<&mut f64> {
        match self {
            NormLayer::GnPlus(s) => Some(&mut s.lambda),
            _ => None,
        }
    }

    pub fn batch_state(&self) -> Option<&BatchNormState> {
        match self {
            NormLayer::Batch { bn, .. } => Some(bn),
            NormLayer::GnPlus(s) => Some(&s.bn),
            NormLayer::Group { .. } => None,
        }
    }

    pub fn batch_state_mut(&mut self) -> Option<&mut BatchNormState> {
        match self {
            NormLayer::Batch { bn, .. } => Some(bn),
            NormLayer::GnPlus(s) => Some(&mut s.bn),
            NormLayer::Group { .. } => None,
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        if let Some(bn) = self.batch_state_mut() {
            bn.mode = mode;
        }
    }

    /// Forward pass; train-mode batch statistics are folded into the
    /// running averages.
    pub fn forward(&mut self, x: &Tensor4) -> Result<(Tensor4, NormCache)> {
        match self {
            NormLayer::Batch { bn, affine } => {
                let (z, cache) = bn_normalize(x, bn)?;
                let y = affine.apply(&z)?;
                Ok((y, NormCache::Batch { bn: cache, z }))
            }
            NormLayer::GnPlus(state) => {
                let (y, cache) = gnplus_forward(x, state)?;
                Ok((y, NormCache::GnPlus(Box::new(cache))))
            }
            NormLayer::Group { .. } => self.forward_frozen(x),
        }
    }

    /// Forward pass that leaves the running statistics untouched.
    pub fn forward_frozen(&self, x: &Tensor4) -> Result<(Tensor4, NormCache)> {
        match self {
            NormLayer::Batch { bn, affine } => {
                let (z, cache) = bn_normalize_frozen(x, bn)?;
                let y = affine.apply(&z)?;
                Ok((y, NormCache::Batch { bn: cache, z }))
            }
            NormLayer::Group { gn, affine } => {
                let (z, cache) = gn_normalize(x, gn)?;
                let y = affine.apply(&z)?;
                Ok((y, NormCache::Group { gn: cache, z }))
            }
            NormLayer::GnPlus(state) => {
                let (y, cache) = gnplus_forward_frozen(x, state)?;
                Ok((y, NormCache::GnPlus(Box::new(cache))))
            }
        }
    }

    pub fn backward(&self, cache: &NormCache, dy: &Tensor4) -> Result<NormGrads> {
        match (self, cache) {
            (NormLayer::Batch { affine, .. }, NormCache::Batch { bn, z }) => {
                let (dz, dgamma, dbeta) = affine.backward(z, dy)?;
                Ok(NormGrads {
                    dx: bn_backward(bn, &dz)?,
                    dgamma,
                    dbeta,
                    dlambda: None,
                })
            }
            (NormLayer::Group { affine, .. }, NormCache::Group { gn, z }) => {
                let (dz, dgamma, dbeta) = affine.backward(z, dy)?;
                Ok(NormGrads {
                    dx: gn_backward(gn, &dz)?,
                    dgamma,
                    dbeta,
                    dlambda: None,
                })
            }
            (NormLayer::GnPlus(_), NormCache::GnPlus(c)) => {
                let g = gnplus_backward(c, dy)?;
                Ok(NormGrads {
                    dx: g.dx,
                    dgamma: g.dgamma,
                    dbeta: g.dbeta,
                    dlambda: Some(g.dlambda),
                })
            }
            _ => Err(Error::Usage(
                "normalization cache does not match the layer kind".into(),
            )),
        }
    }
}

/// Means of `dy` and `dy·x_hat` over one block of elements sharing a mean
/// and inverse standard deviation. With them the input gradient of
/// `x_hat = (x - mean)·inv_std` is `inv_std · (dy - m_dy - x_hat · m_dyx)`.
pub(crate) fn block_grad_moments(pairs: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum_dy = 0.0;
    let mut sum_dyx = 0.0;
    for (x_hat, dy) in pairs {
        count += 1;
        sum_dy += dy;
        sum_dyx += dy * x_hat;
    }
    let m = count.max(1) as f64;
    (sum_dy / m, sum_dyx / m)
}
