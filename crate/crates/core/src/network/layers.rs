use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given the forward input; zero at and below 0.
pub fn relu_backward(x: &Tensor4, dy: &Tensor4) -> Result<Tensor4> {
    x.zip_map(dy, |xv, d| if xv > 0.0 { d } else { 0.0 })
}

/// `(N, C, H, W) → (N, C, 1, 1)` spatial mean.
pub fn global_avg_pool_forward(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::shape(format!("cannot pool empty plane {s}")));
    }
    let inv = 1.0 / s.plane() as f64;
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    Tensor4::from_vec(Shape4::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward(input_shape: Shape4, dy: &Tensor4) -> Result<Tensor4> {
    if dy.shape() != Shape4::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::shape(format!(
            "pool gradient {} does not match input {input_shape}",
            dy.shape()
        )));
    }
    let p = input_shape.plane();
    let inv = 1.0 / p as f64;
    let mut dx = Tensor4::zeros(input_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(p).zip(dy.data()) {
        chunk.fill(g * inv);
    }
    Ok(dx)
}

/// Fully connected layer over the flattened `C·H·W` features of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::config("linear layer needs non-zero features"));
        }
        Ok(Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        })
    }

    fn check(&self, x: &Tensor4) -> Result<usize> {
        let s = x.shape();
        if s.c * s.plane() != self.in_features {
            return Err(Error::shape(format!(
                "linear expects {} features per sample, input {s}",
                self.in_features
            )));
        }
        Ok(s.n)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let n = self.check(x)?;
        let mut y = vec![0.0; n * self.out_features];
        for row in y.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias);
        }
        // Y = X · Wᵀ
        gemm(
            n,
            self.in_features,
            self.out_features,
            Mat::row_major(x.data(), self.in_features),
            Mat::transposed(&self.weight, self.in_features),
            1.0,
            &mut y,
        );
        Tensor4::from_vec(Shape4::new(n, self.out_features, 1, 1), y)
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
        let n = self.check(x)?;
        if dy.shape() != Shape4::new(n, self.out_features, 1, 1) {
            return Err(Error::shape(format!(
                "linear gradient {} does not match output ({n}, {}, 1, 1)",
                dy.shape(),
                self.out_features
            )));
        }
        let mut dw = vec![0.0; self.weight.len()];
        // dW = dYᵀ · X
        gemm(
            self.out_features,
            n,
            self.in_features,
            Mat::transposed(dy.data(), self.out_features),
            Mat::row_major(x.data(), self.in_features),
            0.0,
            &mut dw,
        );
        let mut db = vec![0.0; self.out_features];
        for row in dy.data().chunks(self.out_features) {
            for (b, g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = vec![0.0; x.len()];
        // dX = dY · W
        gemm(
            n,
            self.out_features,
            self.in_features,
            Mat::row_major(dy.data(), self.out_features),
            Mat::row_major(&self.weight, self.in_features),
            0.0,
            &mut dx,
        );
        Ok((Tensor4::from_vec(x.shape(), dx)?, dw, db))
    }
}

/// Additive Gaussian noise `y + n`, `n ~ Normal(mu, sigma)` drawn fresh per
/// element. The gradient passes through unchanged.
pub fn noise_inject<R: Rng + ?Sized>(y: &Tensor4, mu: f64, sigma: f64, rng: &mut R) -> Result<Tensor4> {
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let dist = Normal::new(mu, sigma)
        .map_err(|e| Error::config(format!("invalid noise parameters mu={mu} sigma={sigma}: {e}")))?;
    let mut out = y.clone();
    for v in out.data_mut() {
        *v += dist.sample(rng);
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot)/N` with respect to the logits.
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let s = logits.shape();
    let k = s.c * s.plane();
    if k < 2 {
        return Err(Error::shape(format!("cross-entropy needs at least 2 classes, got {s}")));
    }
    if labels.len() != s.n || s.n == 0 {
        return Err(Error::Input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = 1.0 / s.n as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for v in row.iter_mut() {
            *v = (*v - log_z).exp() * inv_n;
        }
        row[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Index of the largest logit per sample; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    let s = logits.shape();
    let k = s.c * s.plane();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
