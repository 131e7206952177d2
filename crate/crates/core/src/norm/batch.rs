use super::{block_grad_moments, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{reduce_mean_var, AxisSet, Tensor4};

/// Batch-normalization hyperparameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub(crate) x_hat: Tensor4,
    pub(crate) inv_std: Vec<f64>,
    pub(crate) mode: Mode,
}

impl BnCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn inv_std(&self) -> &[f64] {
        &self.inv_std
    }
}

/// Per-channel normalization over `(N, H, W)`. Train mode uses the batch
/// statistics and folds them into the running averages; eval mode uses the
/// running averages unchanged.
pub fn bn_normalize(x: &Tensor4, state: &mut BatchNormState) -> Result<(Tensor4, BnCache)> {
    let (y, cache, stats) = bn_apply(x, state)?;
    if let Some((mean, var)) = stats {
        state.update_running(&mean, &var);
    }
    Ok((y, cache))
}

/// Like [`bn_normalize`] but never touches the running statistics.
pub fn bn_normalize_frozen(x: &Tensor4, state: &BatchNormState) -> Result<(Tensor4, BnCache)> {
    bn_apply(x, state).map(|(y, c, _)| (y, c))
}

type BatchStats = (Vec<f64>, Vec<f64>);

fn bn_apply(x: &Tensor4, state: &BatchNormState) -> Result<(Tensor4, BnCache, Option<BatchStats>)> {
    let s = x.shape();
    if s.c != state.channels() {
        return Err(Error::shape(format!(
            "batch norm configured for {} channels, input {}",
            state.channels(),
            s
        )));
    }
    let (mean, var, stats) = match state.mode {
        Mode::Train => {
            if s.n * s.plane() < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batch statistics need N·H·W >= 2, input {s}"
                )));
            }
            let (m, v) = reduce_mean_var(x, AxisSet::NHW)?;
            let (m, v) = (m.into_vec(), v.into_vec());
            (m.clone(), v.clone(), Some((m, v)))
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();

    let p = s.plane();
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(p).enumerate() {
        let c = i % s.c;
        let (mu, k) = (mean[c], inv_std[c]);
        for v in chunk {
            *v = (*v - mu) * k;
        }
    }
    let cache = BnCache {
        x_hat: y.clone(),
        inv_std,
        mode: state.mode,
    };
    Ok((y, cache, stats))
}

/// Input gradient of [`bn_normalize`]. A train-mode cache differentiates
/// through the batch mean and variance; an eval-mode cache treats the
/// running statistics as constants.
pub fn bn_backward(cache: &BnCache, dy: &Tensor4) -> Result<Tensor4> {
    cache.x_hat.ensure_same_shape(dy).map_err(|_| {
        Error::Usage(format!(
            "gradient shape {} does not match cached forward {}",
            dy.shape(),
            cache.x_hat.shape()
        ))
    })?;
    let s = dy.shape();
    let p = s.plane();
    let mut dx = dy.clone();
    match cache.mode {
        Mode::Eval => {
            for (i, chunk) in dx.data_mut().chunks_mut(p).enumerate() {
                let k = cache.inv_std[i % s.c];
                chunk.iter_mut().for_each(|v| *v *= k);
            }
        }
        Mode::Train => {
            for c in 0..s.c {
                let pairs = (0..s.n).flat_map(|n| {
                    cache
                        .x_hat
                        .plane(n, c)
                        .iter()
                        .copied()
                        .zip(dy.plane(n, c).iter().copied())
                });
                let (m_dy, m_dyx) = block_grad_moments(pairs);
                let k = cache.inv_std[c];
                for n in 0..s.n {
                    let start = dx.offset(n, c, 0, 0);
                    let xh = cache.x_hat.plane(n, c);
                    for (j, d) in dx.data_mut()[start..start + p].iter_mut().enumerate() {
                        *d = k * (*d - m_dy - xh[j] * m_dyx);
                    }
                }
            }
        }
    }
    Ok(dx)
}
