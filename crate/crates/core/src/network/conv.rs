//! 3×3 convolution with zero padding 1, lowered to GEMM through im2col.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

const K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `(out, in, 3, 3)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: Shape4,
    out_h: usize,
    out_w: usize,
    /// One `(in·9) × (out_h·out_w)` column matrix per sample.
    cols: Vec<f64>,
}

impl Conv3x3 {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config("convolution needs at least one channel"));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::config(format!("unsupported stride {stride}")));
        }
        Ok(Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * in_channels * K * K],
            bias: vec![0.0; out_channels],
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * K * K
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_channels {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        if input.h == 0 || input.w == 0 {
            return Err(Error::shape(format!("empty spatial extent {input}")));
        }
        let oh = (input.h - 1) / self.stride + 1;
        let ow = (input.w - 1) / self.stride + 1;
        Ok(Shape4::new(input.n, self.out_channels, oh, ow))
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ConvCache)> {
        let out_shape = self.output_shape(x.shape())?;
        let s = x.shape();
        let (oh, ow) = (out_shape.h, out_shape.w);
        let p = oh * ow;
        let kl = self.patch_len();
        let mut cols = vec![0.0; s.n * kl * p];
        for n in 0..s.n {
            im2col(x, n, self.stride, oh, ow, &mut cols[n * kl * p..(n + 1) * kl * p]);
        }
        let mut y = Tensor4::zeros(out_shape);
        let out_per_sample = self.out_channels * p;
        for n in 0..s.n {
            let yn = &mut y.data_mut()[n * out_per_sample..(n + 1) * out_per_sample];
            for (o, row) in yn.chunks_mut(p).enumerate() {
                row.fill(self.bias[o]);
            }
            gemm(
                self.out_channels,
                kl,
                p,
                Mat::row_major(&self.weight, kl),
                Mat::row_major(&cols[n * kl * p..(n + 1) * kl * p], p),
                1.0,
                yn,
            );
        }
        Ok((
            y,
            ConvCache {
                input_shape: s,
                out_h: oh,
                out_w: ow,
                cols,
            },
        ))
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(&self, cache: &ConvCache, dy: &Tensor4) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
        let s = cache.input_shape;
        let expected = Shape4::new(s.n, self.out_channels, cache.out_h, cache.out_w);
        if dy.shape() != expected {
            return Err(Error::shape(format!(
                "convolution gradient {} does not match output {expected}",
                dy.shape()
            )));
        }
        let p = cache.out_h * cache.out_w;
        let kl = self.patch_len();
        let out_per_sample = self.out_channels * p;
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_channels];
        let mut dx = Tensor4::zeros(s);
        let mut dcols = vec![0.0; kl * p];
        for n in 0..s.n {
            let dyn_ = &dy.data()[n * out_per_sample..(n + 1) * out_per_sample];
            let cols = &cache.cols[n * kl * p..(n + 1) * kl * p];
            for (o, row) in dyn_.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
            // dW += dY · colsᵀ
            gemm(
                self.out_channels,
                p,
                kl,
                Mat::row_major(dyn_, p),
                Mat::transposed(cols, p),
                1.0,
                &mut dw,
            );
            // dcols = Wᵀ · dY
            gemm(
                kl,
                self.out_channels,
                p,
                Mat::transposed(&self.weight, kl),
                Mat::row_major(dyn_, p),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, n, self.stride, cache.out_h, cache.out_w, &mut dx);
        }
        Ok((dx, dw, db))
    }
}

fn im2col(x: &Tensor4, n: usize, stride: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let s = x.shape();
    let p = oh * ow;
    for c in 0..s.c {
        let plane = x.plane(n, c);
        for kh in 0..K {
            for kw in 0..K {
                let row = ((c * K + kh) * K + kw) * p;
                for y in 0..oh {
                    let ih = (y * stride + kh) as isize - 1;
                    let dst = &mut out[row + y * ow..row + (y + 1) * ow];
                    if ih < 0 || ih as usize >= s.h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let iw = (xo * stride + kw) as isize - 1;
                        *d = if iw < 0 || iw as usize >= s.w {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], n: usize, stride: usize, oh: usize, ow: usize, dx: &mut Tensor4) {
    let s = dx.shape();
    let p = oh * ow;
    for c in 0..s.c {
        let base = dx.offset(n, c, 0, 0);
        for kh in 0..K {
            for kw in 0..K {
                let row = ((c * K + kh) * K + kw) * p;
                for y in 0..oh {
                    let ih = (y * stride + kh) as isize - 1;
                    if ih < 0 || ih as usize >= s.h {
                        continue;
                    }
                    for xo in 0..ow {
                        let iw = (xo * stride + kw) as isize - 1;
                        if iw < 0 || iw as usize >= s.w {
                            continue;
                        }
                        dx.data_mut()[base + ih as usize * s.w + iw as usize] +=
                            cols[row + y * ow + xo];
                    }
                }
            }
        }
    }
}

/// A dense matrix operand described by its buffer and strides.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Mat<'a> {
    /// Row-major matrix with `cols` columns.
    pub(crate) fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub(crate) fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        (rows.saturating_sub(1)) * self.row_stride as usize
            + (cols.saturating_sub(1)) * self.col_stride as usize
    }
}

/// `c ← a·b + beta·c` with `a: m×k`, `b: k×n` and row-major `c: m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset(m, k) < a.data.len());
    assert!(b.max_offset(k, n) < b.data.len());
    // SAFETY: the asserts above keep every strided access of `a`, `b` and
    // `c` inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv3x3, x: &Tensor4) -> Tensor4 {
        let out = conv.output_shape(x.shape()).unwrap();
        let s = x.shape();
        Tensor4::from_fn(out, |n, o, y, xo| {
            let mut acc = conv.bias[o];
            for c in 0..s.c {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let ih = (y * conv.stride + kh) as isize - 1;
                        let iw = (xo * conv.stride + kw) as isize - 1;
                        if ih >= 0 && iw >= 0 && (ih as usize) < s.h && (iw as usize) < s.w {
                            acc += conv.weight[((o * s.c + c) * 3 + kh) * 3 + kw]
                                * x.at(n, c, ih as usize, iw as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_conv(i: usize, o: usize, stride: usize, seed: u64) -> Conv3x3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Conv3x3::new(i, o, stride).unwrap();
        c.weight.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        c.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        c
    }

    #[test]
    fn centre_tap_kernel_is_identity() {
        let mut conv = Conv3x3::new(1, 1, 1).unwrap();
        conv.weight[4] = 1.0;
        let x = Tensor4::from_fn(Shape4::new(2, 1, 4, 5), |n, _, h, w| (n * 100 + h * 10 + w) as f64);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops_for_both_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::from_fn(Shape4::new(2, 3, 5, 5), |_, _, _, _| rng.gen_range(-1.0..1.0));
        for stride in [1, 2] {
            let conv = random_conv(3, 4, stride, 2);
            let (y, _) = conv.forward(&x).unwrap();
            let want = naive_conv(&conv, &x);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_resolution() {
        let conv = Conv3x3::new(3, 8, 2).unwrap();
        assert_eq!(
            conv.output_shape(Shape4::new(1, 3, 32, 32)).unwrap(),
            Shape4::new(1, 8, 16, 16)
        );
        assert_eq!(
            conv.output_shape(Shape4::new(1, 3, 5, 5)).unwrap(),
            Shape4::new(1, 8, 3, 3)
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let conv = random_conv(3, 2, 1, 3);
        let x = Tensor4::filled(Shape4::new(2, 3, 4, 4), 0.5);
        let (y, cache) = conv.forward(&x).unwrap();
        let (dx, dw, db) = conv.backward(&cache, &Tensor4::zeros(y.shape())).unwrap();
        assert!(dx.data().iter().chain(&dw).chain(&db).all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let conv = Conv3x3::new(3, 2, 1).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 2, 4, 4));
        assert!(matches!(conv.forward(&x), Err(Error::InvalidShape(_))));
    }
}
