//! Gated combination of group and batch normalization.
//!
//! Each variant produces a GN-path output `ŷ` and a BN-path output `ỹ`:
//!
//! | variant  | `ŷ`          | `ỹ`          |
//! |----------|--------------|--------------|
//! | GnFirst  | `GN(x)`      | `BN(ŷ)`      |
//! | BnFirst  | `GN(ỹ)`      | `BN(x)`      |
//! | Parallel | `GN(x)`      | `BN(x)`      |
//!
//! and the layer output is `γ·(S(λ)·ŷ + (1 − S(λ))·ỹ) + β` with a single
//! per-channel affine after the gate.

use super::{
    bn_backward, bn_normalize, bn_normalize_frozen, gn_backward, gn_normalize, sigmoid_gate,
    AffineParams, BatchNormState, BnCache, GnCache, GroupNormConfig,
};
use crate::error::Result;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GnPlusVariant {
    GnFirst,
    BnFirst,
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnPlusState {
    pub variant: GnPlusVariant,
    pub lambda: f64,
    pub gn: GroupNormConfig,
    pub bn: BatchNormState,
    pub affine: AffineParams,
}

impl GnPlusState {
    pub fn new(variant: GnPlusVariant, channels: usize, gn: GroupNormConfig) -> Self {
        Self {
            variant,
            lambda: 1.0,
            gn,
            bn: BatchNormState::new(channels),
            affine: AffineParams::new(channels),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GnPlusCache {
    pub variant: GnPlusVariant,
    pub gate: f64,
    pub gamma: Vec<f64>,
    /// GN-path output `ŷ`.
    pub y_gn: Tensor4,
    /// BN-path output `ỹ`.
    pub y_bn: Tensor4,
    /// Gated combination before the affine.
    pub z: Tensor4,
    gn: GnCache,
    bn: BnCache,
}

#[derive(Debug, Clone)]
pub struct GnPlusGrads {
    pub dx: Tensor4,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dlambda: f64,
}

pub fn gnplus_forward(x: &Tensor4, state: &mut GnPlusState) -> Result<(Tensor4, GnPlusCache)> {
    let GnPlusState {
        variant,
        lambda,
        gn,
        bn,
        affine,
    } = state;
    forward_with(x, *variant, *lambda, gn, affine, |t| bn_normalize(t, bn))
}

/// Same as [`gnplus_forward`] without updating the BN running statistics.
pub fn gnplus_forward_frozen(x: &Tensor4, state: &GnPlusState) -> Result<(Tensor4, GnPlusCache)> {
    forward_with(
        x,
        state.variant,
        state.lambda,
        &state.gn,
        &state.affine,
        |t| bn_normalize_frozen(t, &state.bn),
    )
}

fn forward_with(
    x: &Tensor4,
    variant: GnPlusVariant,
    lambda: f64,
    gn: &GroupNormConfig,
    affine: &AffineParams,
    mut bn: impl FnMut(&Tensor4) -> Result<(Tensor4, BnCache)>,
) -> Result<(Tensor4, GnPlusCache)> {
    let (y_gn, gn_cache, y_bn, bn_cache) = match variant {
        GnPlusVariant::GnFirst => {
            let (y_gn, gc) = gn_normalize(x, gn)?;
            let (y_bn, bc) = bn(&y_gn)?;
            (y_gn, gc, y_bn, bc)
        }
        GnPlusVariant::BnFirst => {
            let (y_bn, bc) = bn(x)?;
            let (y_gn, gc) = gn_normalize(&y_bn, gn)?;
            (y_gn, gc, y_bn, bc)
        }
        GnPlusVariant::Parallel => {
            let (y_gn, gc) = gn_normalize(x, gn)?;
            let (y_bn, bc) = bn(x)?;
            (y_gn, gc, y_bn, bc)
        }
    };
    let s = sigmoid_gate(lambda);
    let z = y_gn.zip_map(&y_bn, |a, b| s * a + (1.0 - s) * b)?;
    let y = affine.apply(&z)?;
    Ok((
        y,
        GnPlusCache {
            variant,
            gate: s,
            gamma: affine.gamma.clone(),
            y_gn,
            y_bn,
            z,
            gn: gn_cache,
            bn: bn_cache,
        },
    ))
}

pub fn gnplus_backward(cache: &GnPlusCache, dy: &Tensor4) -> Result<GnPlusGrads> {
    let affine = AffineParams {
        gamma: cache.gamma.clone(),
        beta: vec![0.0; cache.gamma.len()],
    };
    let (dz, dgamma, dbeta) = affine.backward(&cache.z, dy)?;
    let s = cache.gate;

    let mut dot = 0.0;
    for ((d, a), b) in dz.data().iter().zip(cache.y_gn.data()).zip(cache.y_bn.data()) {
        dot += d * (a - b);
    }
    let dlambda = s * (1.0 - s) * dot;

    let d_gn_path = dz.scale(s);
    let d_bn_path = dz.scale(1.0 - s);
    let dx = match cache.variant {
        GnPlusVariant::GnFirst => {
            // ŷ feeds the gate directly and also the BN stage.
            let mut d_y_gn = bn_backward(&cache.bn, &d_bn_path)?;
            d_y_gn.add_assign(&d_gn_path)?;
            gn_backward(&cache.gn, &d_y_gn)?
        }
        GnPlusVariant::BnFirst => {
            let mut d_y_bn = gn_backward(&cache.gn, &d_gn_path)?;
            d_y_bn.add_assign(&d_bn_path)?;
            bn_backward(&cache.bn, &d_y_bn)?
        }
        GnPlusVariant::Parallel => {
            let mut dx = gn_backward(&cache.gn, &d_gn_path)?;
            dx.add_assign(&bn_backward(&cache.bn, &d_bn_path)?)?;
            dx
        }
    };
    Ok(GnPlusGrads {
        dx,
        dgamma,
        dbeta,
        dlambda,
    })
}
