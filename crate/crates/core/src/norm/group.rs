use super::{block_grad_moments, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::tensor::{group_view, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNormConfig {
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormConfig {
    pub fn new(groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::config("group count must be at least 1"));
        }
        Ok(Self {
            groups,
            eps: DEFAULT_EPS,
        })
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if !channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "channel count {channels} is not divisible by group count {}",
                self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GnCache {
    pub(crate) x_hat: Tensor4,
    /// One entry per `(sample, group)`, sample-major.
    pub(crate) inv_std: Vec<f64>,
    pub(crate) groups: usize,
}

impl GnCache {
    pub fn groups(&self) -> usize {
        self.groups
    }
}

/// Normalizes each sample over contiguous blocks of `C/G` channels and the
/// spatial axes. Statistics never mix samples.
pub fn gn_normalize(x: &Tensor4, cfg: &GroupNormConfig) -> Result<(Tensor4, GnCache)> {
    cfg.check_channels(x.shape().c)?;
    let s = x.shape();
    let mut view = group_view(x.clone(), cfg.groups)?;
    if view.block_len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "group statistics need (C/G)·H·W >= 2, input {s} with {} groups",
            cfg.groups
        )));
    }
    let count = view.block_len() as f64;
    let mut inv_std = Vec::with_capacity(s.n * cfg.groups);
    for n in 0..s.n {
        for g in 0..cfg.groups {
            let block = view.block_mut(n, g);
            let mean = block.iter().sum::<f64>() / count;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let k = 1.0 / (var + cfg.eps).sqrt();
            for v in block.iter_mut() {
                *v = (*v - mean) * k;
            }
            inv_std.push(k);
        }
    }
    let y = view.into_tensor();
    let cache = GnCache {
        x_hat: y.clone(),
        inv_std,
        groups: cfg.groups,
    };
    Ok((y, cache))
}

pub fn gn_backward(cache: &GnCache, dy: &Tensor4) -> Result<Tensor4> {
    cache.x_hat.ensure_same_shape(dy).map_err(|_| {
        Error::Usage(format!(
            "gradient shape {} does not match cached forward {}",
            dy.shape(),
            cache.x_hat.shape()
        ))
    })?;
    let n_total = dy.shape().n;
    let x_hat = group_view(cache.x_hat.clone(), cache.groups)?;
    let mut dx = group_view(dy.clone(), cache.groups)?;
    for n in 0..n_total {
        for g in 0..cache.groups {
            let xh = x_hat.block(n, g);
            let block = dx.block_mut(n, g);
            let (m_dy, m_dyx) =
                block_grad_moments(xh.iter().copied().zip(block.iter().copied()));
            let k = cache.inv_std[n * cache.groups + g];
            for (d, &xv) in block.iter_mut().zip(xh) {
                *d = k * (*d - m_dy - xv * m_dyx);
            }
        }
    }
    Ok(dx.into_tensor())
}
