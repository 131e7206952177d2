//! Dense `(N, C, H, W)` tensors and the reductions the normalization layers
//! are assembled from.
//!
//! All reductions walk the data in a fixed row-major order, so results are
//! bit-reproducible for a given input.

use std::fmt;

use bitflags::bitflags;

use crate::error::{Error, Result};

/// Extents of a 4D activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    /// Spatial plane size `H·W`.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Shape with every axis in `axes` collapsed to extent 1.
    pub fn reduced(&self, axes: AxisSet) -> Shape4 {
        let mut d = self.dims();
        for (i, ax) in AxisSet::ORDER.iter().enumerate() {
            if axes.contains(*ax) {
                d[i] = 1;
            }
        }
        Shape4::from_dims(d)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

bitflags! {
    /// Which of the `N, C, H, W` axes take part in a reduction.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct AxisSet: u8 {
        const N = 0b0001;
        const C = 0b0010;
        const H = 0b0100;
        const W = 0b1000;
    }
}

impl AxisSet {
    const ORDER: [AxisSet; 4] = [AxisSet::N, AxisSet::C, AxisSet::H, AxisSet::W];

    /// Batch-norm statistic axes.
    pub const NHW: AxisSet = AxisSet::N.union(AxisSet::H).union(AxisSet::W);
    pub const HW: AxisSet = AxisSet::H.union(AxisSet::W);
}

/// Row-major `(N, C, H, W)` tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Reinterpret the same data under a new shape of equal length.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn ensure_same_shape(&self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elements of one `(sample, channel)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }
}

/// Mean and biased variance over `axes`; both results have `x`'s shape with
/// the reduced axes collapsed to 1.
pub fn reduce_mean_var(x: &Tensor4, axes: AxisSet) -> Result<(Tensor4, Tensor4)> {
    if axes.is_empty() {
        return Err(Error::shape("reduction needs at least one axis"));
    }
    let s = x.shape();
    let out_shape = s.reduced(axes);
    let count = s.len() / out_shape.len().max(1);
    if s.is_empty() || count == 0 {
        return Err(Error::shape(format!("empty reduction extent for {s}")));
    }
    let inv = 1.0 / count as f64;

    let mut mean = Tensor4::zeros(out_shape);
    for_each_reduced(s, out_shape, |src, dst| mean.data[dst] += x.data[src]);
    for m in &mut mean.data {
        *m *= inv;
    }
    let mut var = Tensor4::zeros(out_shape);
    for_each_reduced(s, out_shape, |src, dst| {
        let d = x.data[src] - mean.data[dst];
        var.data[dst] += d * d;
    });
    for v in &mut var.data {
        *v *= inv;
    }
    Ok((mean, var))
}

/// Visits every element of `full` in row-major order together with the
/// offset of its broadcast partner in `reduced`.
fn for_each_reduced(full: Shape4, reduced: Shape4, mut f: impl FnMut(usize, usize)) {
    let pick = |extent: usize, i: usize| if extent == 1 { 0 } else { i };
    let mut src = 0;
    for n in 0..full.n {
        let rn = pick(reduced.n, n);
        for c in 0..full.c {
            let rc = pick(reduced.c, c);
            for h in 0..full.h {
                let rh = pick(reduced.h, h);
                let base = ((rn * reduced.c + rc) * reduced.h + rh) * reduced.w;
                for w in 0..full.w {
                    f(src, base + pick(reduced.w, w));
                    src += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BroadcastOp {
    Sub,
    Div,
    Mul,
    Add,
}

impl BroadcastOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BroadcastOp::Sub => a - b,
            BroadcastOp::Div => a / b,
            BroadcastOp::Mul => a * b,
            BroadcastOp::Add => a + b,
        }
    }
}

/// Elementwise `x op stat`, where each axis of `stat` either matches `x` or
/// has extent 1.
pub fn broadcast_apply(x: &Tensor4, stat: &Tensor4, op: BroadcastOp) -> Result<Tensor4> {
    let (xs, ss) = (x.shape().dims(), stat.shape().dims());
    if xs.iter().zip(&ss).any(|(&a, &b)| b != 1 && b != a) {
        return Err(Error::shape(format!(
            "cannot broadcast {} onto {}",
            stat.shape(),
            x.shape()
        )));
    }
    let mut out = Tensor4::zeros(x.shape());
    for_each_reduced(x.shape(), stat.shape(), |src, dst| {
        out.data[src] = op.apply(x.data[src], stat.data[dst]);
    });
    Ok(out)
}

/// `(N, G, C/G, H, W)` view of a tensor whose channels are split into `G`
/// contiguous blocks. Group `k` holds channels `[k·C/G, (k+1)·C/G)`.
///
/// In row-major `NCHW` storage each `(sample, group)` block is one contiguous
/// run of `C/G·H·W` values, so the view shares the tensor's buffer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedTensor {
    shape: Shape4,
    groups: usize,
    data: Vec<f64>,
}

pub fn group_view(x: Tensor4, groups: usize) -> Result<GroupedTensor> {
    let c = x.shape().c;
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "channel count {c} is not divisible by group count {groups}"
        )));
    }
    Ok(GroupedTensor {
        shape: x.shape(),
        groups,
        data: x.data,
    })
}

impl GroupedTensor {
    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels_per_group(&self) -> usize {
        self.shape.c / self.groups
    }

    /// Extents of the 5D view: `(N, G, C/G, H, W)`.
    pub fn dims(&self) -> [usize; 5] {
        [
            self.shape.n,
            self.groups,
            self.channels_per_group(),
            self.shape.h,
            self.shape.w,
        ]
    }

    pub fn block_len(&self) -> usize {
        self.channels_per_group() * self.shape.plane()
    }

    /// Values of group `g` of sample `n`.
    pub fn block(&self, n: usize, g: usize) -> &[f64] {
        let len = self.block_len();
        let start = (n * self.groups + g) * len;
        &self.data[start..start + len]
    }

    pub fn block_mut(&mut self, n: usize, g: usize) -> &mut [f64] {
        let len = self.block_len();
        let start = (n * self.groups + g) * len;
        &mut self.data[start..start + len]
    }

    pub fn group_of_channel(&self, c: usize) -> usize {
        c / self.channels_per_group()
    }

    pub fn channels_of_group(&self, g: usize) -> std::ops::Range<usize> {
        let k = self.channels_per_group();
        g * k..(g + 1) * k
    }

    /// Inverse of [`group_view`].
    pub fn into_tensor(self) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-3.0..3.0))
    }

    // Independent nested-loop oracle: for each output cell, scan the full
    // tensor and keep the elements whose non-reduced coordinates match.
    fn oracle_mean_var(x: &Tensor4, axes: AxisSet) -> (Vec<f64>, Vec<f64>) {
        let s = x.shape();
        let r = s.reduced(axes);
        let mut means = vec![];
        let mut vars = vec![];
        for on in 0..r.n {
            for oc in 0..r.c {
                for oh in 0..r.h {
                    for ow in 0..r.w {
                        let mut vals = vec![];
                        for n in 0..s.n {
                            for c in 0..s.c {
                                for h in 0..s.h {
                                    for w in 0..s.w {
                                        let keep = (axes.contains(AxisSet::N) || n == on)
                                            && (axes.contains(AxisSet::C) || c == oc)
                                            && (axes.contains(AxisSet::H) || h == oh)
                                            && (axes.contains(AxisSet::W) || w == ow);
                                        if keep {
                                            vals.push(x.at(n, c, h, w));
                                        }
                                    }
                                }
                            }
                        }
                        let m = vals.iter().sum::<f64>() / vals.len() as f64;
                        let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                            / vals.len() as f64;
                        means.push(m);
                        vars.push(v);
                    }
                }
            }
        }
        (means, vars)
    }

    #[test]
    fn constant_input_has_zero_variance() {
        let x = Tensor4::filled(Shape4::new(2, 3, 2, 2), 5.0);
        let (m, v) = reduce_mean_var(&x, AxisSet::NHW).unwrap();
        assert_eq!(m.shape(), Shape4::new(1, 3, 1, 1));
        assert!(m.data().iter().all(|&a| a == 5.0));
        assert!(v.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn four_values_over_spatial_axes() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (m, v) = reduce_mean_var(&x, AxisSet::HW).unwrap();
        assert_eq!(m.data(), &[2.5]);
        assert_eq!(v.data(), &[1.25]);
    }

    #[test]
    fn bn_axes_match_loop_oracle() {
        let x = random(Shape4::new(2, 3, 4, 4), 11);
        let (m, v) = reduce_mean_var(&x, AxisSet::NHW).unwrap();
        let (om, ov) = oracle_mean_var(&x, AxisSet::NHW);
        for (a, b) in m.data().iter().zip(&om) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for (a, b) in v.data().iter().zip(&ov) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn empty_axis_set_and_empty_tensor_rejected() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        assert!(matches!(
            reduce_mean_var(&x, AxisSet::empty()),
            Err(Error::InvalidShape(_))
        ));
        let e = Tensor4::zeros(Shape4::new(0, 1, 2, 2));
        assert!(matches!(
            reduce_mean_var(&e, AxisSet::NHW),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn broadcast_scalar_div() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![4.0, 6.0]).unwrap();
        let s = Tensor4::filled(Shape4::new(1, 1, 1, 1), 2.0);
        let y = broadcast_apply(&x, &s, BroadcastOp::Div).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn broadcast_sub_zero_is_identity() {
        let x = random(Shape4::new(2, 3, 2, 2), 3);
        let z = Tensor4::zeros(Shape4::new(1, 3, 1, 1));
        assert_eq!(broadcast_apply(&x, &z, BroadcastOp::Sub).unwrap(), x);
    }

    #[test]
    fn broadcast_matches_loop_oracle() {
        let x = random(Shape4::new(2, 3, 4, 5), 5);
        let stat = random(Shape4::new(2, 1, 4, 1), 6);
        for op in [
            BroadcastOp::Sub,
            BroadcastOp::Div,
            BroadcastOp::Mul,
            BroadcastOp::Add,
        ] {
            let y = broadcast_apply(&x, &stat, op).unwrap();
            for n in 0..2 {
                for c in 0..3 {
                    for h in 0..4 {
                        for w in 0..5 {
                            let a = x.at(n, c, h, w);
                            let b = stat.at(n, 0, h, 0);
                            let want = match op {
                                BroadcastOp::Sub => a - b,
                                BroadcastOp::Div => a / b,
                                BroadcastOp::Mul => a * b,
                                BroadcastOp::Add => a + b,
                            };
                            assert!((y.at(n, c, h, w) - want).abs() <= 1e-12 * want.abs().max(1.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let x = Tensor4::zeros(Shape4::new(2, 3, 2, 2));
        let s = Tensor4::zeros(Shape4::new(1, 2, 1, 1));
        assert!(broadcast_apply(&x, &s, BroadcastOp::Add).is_err());
    }

    #[test]
    fn groups_are_contiguous_channel_blocks() {
        let x = Tensor4::from_fn(Shape4::new(1, 4, 1, 1), |_, c, _, _| c as f64);
        let g = group_view(x.clone(), 2).unwrap();
        assert_eq!(g.block(0, 0), &[0.0, 1.0]);
        assert_eq!(g.block(0, 1), &[2.0, 3.0]);
        assert_eq!(g.channels_of_group(1), 2..4);

        let one = group_view(x.clone(), 1).unwrap();
        assert_eq!(one.dims(), [1, 1, 4, 1, 1]);
        let per_channel = group_view(x, 4).unwrap();
        assert_eq!(per_channel.dims(), [1, 4, 1, 1, 1]);
        assert_eq!(per_channel.group_of_channel(3), 3);
    }

    #[test]
    fn indivisible_groups_is_config_error() {
        let x = Tensor4::zeros(Shape4::new(1, 6, 1, 1));
        assert!(matches!(group_view(x, 4), Err(Error::Config(_))));
    }

    fn arb_tensor() -> impl Strategy<Value = (Tensor4, usize)> {
        (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(
            |(n, g, k, h, w)| {
                let shape = Shape4::new(n, g * k, h, w);
                prop::collection::vec(-1e3f64..1e3, shape.len())
                    .prop_map(move |d| (Tensor4::from_vec(shape, d).unwrap(), g))
            },
        )
    }

    proptest! {
        #[test]
        fn group_view_round_trips((x, g) in arb_tensor()) {
            let back = group_view(x.clone(), g).unwrap().into_tensor();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn reduction_matches_oracle_and_var_nonnegative((x, _) in arb_tensor(), bits in 1u8..16) {
            let axes = AxisSet::from_bits_truncate(bits);
            let (m, v) = reduce_mean_var(&x, axes).unwrap();
            let (om, ov) = oracle_mean_var(&x, axes);
            for (a, b) in m.data().iter().zip(&om) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (a, b) in v.data().iter().zip(&ov) {
                prop_assert!(*a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
