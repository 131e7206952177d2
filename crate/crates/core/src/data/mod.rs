//! Labeled image sets, the seeded synthetic generator and batching.

mod cifar;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub use cifar::{
    decode_record, load_cifar10, load_cifar10_records, CIFAR10_MEAN, CIFAR10_STD, RECORD_BYTES,
    RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Gathers the listed samples into a new set.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let images = Tensor4::from_vec(Shape4::new(indices.len(), c, h, w), data)?;
        Self::new(images, labels, self.classes, self.split)
    }

    /// The first `n` samples in file order, taken class by class so that the
    /// subset is as balanced as the source allows.
    pub fn take_balanced(&self, n: usize) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let k = self.classes;
        let mut quota: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        let mut picked = Vec::with_capacity(n);
        for (i, &l) in self.labels.iter().enumerate() {
            if quota[l] > 0 {
                quota[l] -= 1;
                picked.push(i);
            }
        }
        // Classes that ran short are topped up with remaining samples.
        if picked.len() < n {
            let taken: std::collections::HashSet<usize> = picked.iter().copied().collect();
            picked.extend((0..self.len()).filter(|i| !taken.contains(i)).take(n - picked.len()));
            picked.sort_unstable();
        }
        self.select(&picked)
    }
}

/// Class-conditional synthetic images: an oriented cosine grating whose
/// angle depends on the class, a class-specific colour offset per channel,
/// and Gaussian pixel noise. The colour offsets make the classes linearly
/// separable from globally pooled features.
pub fn synth_dataset(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    h: usize,
    w: usize,
) -> Result<LabeledImageSet> {
    if classes < 2 {
        return Err(Error::Input("synthetic set needs at least 2 classes".into()));
    }
    if n_per_class == 0 || h == 0 || w == 0 {
        return Err(Error::Input("synthetic set would be empty".into()));
    }
    const CHANNELS: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let total = n_per_class * classes;
    let mut data = Vec::with_capacity(total * CHANNELS * h * w);
    let mut labels = Vec::with_capacity(total);
    let tau = std::f64::consts::TAU;
    for i in 0..total {
        let k = i % classes;
        let angle = std::f64::consts::PI * k as f64 / classes as f64;
        let (ca, sa) = (angle.cos(), angle.sin());
        let phase = rng.gen_range(0.0..tau);
        let freq = 1.5;
        for c in 0..CHANNELS {
            let colour = 0.5 * (tau * k as f64 / classes as f64 + tau * c as f64 / 3.0).cos();
            for y in 0..h {
                let v = y as f64 / h as f64;
                for x in 0..w {
                    let u = x as f64 / w as f64;
                    let grating = 0.5 * (tau * freq * (u * ca + v * sa) + phase).cos();
                    data.push(colour + grating + noise.sample(&mut rng));
                }
            }
        }
        labels.push(k);
    }
    let images = Tensor4::from_vec(Shape4::new(total, CHANNELS, h, w), data)?;
    LabeledImageSet::new(images, labels, classes, Split::Train)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Final partial batch dropped so every batch has the same size.
    Train,
    /// Every sample visited exactly once.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over mini-batches of a set. With a shuffle seed the visiting
/// order is a seeded permutation; without one it is the set's order.
pub struct BatchIter<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    end: usize,
}

pub fn batch_iterator(
    set: &LabeledImageSet,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    mode: BatchMode,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let end = match mode {
        BatchMode::Train => set.len() / batch_size * batch_size,
        BatchMode::Eval => set.len(),
    };
    Ok(BatchIter {
        set,
        order,
        batch_size,
        pos: 0,
        end,
    })
}

impl BatchIter<'_> {
    pub fn batches_remaining(&self) -> usize {
        (self.end - self.pos).div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.end {
            return None;
        }
        let stop = (self.pos + self.batch_size).min(self.end);
        let indices = self.order[self.pos..stop].to_vec();
        self.pos = stop;
        let sub = self
            .set
            .select(&indices)
            .expect("indices drawn from the set are in range");
        Some(Batch {
            images: sub.images,
            labels: sub.labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.batches_remaining();
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Optional train-time augmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    #[serde(default)]
    pub hflip: bool,
    /// Random crop after zero-padding by 4 pixels.
    #[serde(default)]
    pub crop: bool,
}

impl Augment {
    pub fn is_active(&self) -> bool {
        self.hflip || self.crop
    }

    pub fn apply<R: Rng>(&self, images: &mut Tensor4, rng: &mut R) {
        if !self.is_active() {
            return;
        }
        const PAD: isize = 4;
        let s = images.shape();
        let src = images.clone();
        for n in 0..s.n {
            let flip = self.hflip && rng.gen_bool(0.5);
            let (dy, dx) = if self.crop {
                (rng.gen_range(-PAD..=PAD), rng.gen_range(-PAD..=PAD))
            } else {
                (0, 0)
            };
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let sy = y as isize + dy;
                        let sx0 = if flip { s.w - 1 - x } else { x };
                        let sx = sx0 as isize + dx;
                        let v = if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                            0.0
                        } else {
                            src.at(n, c, sy as usize, sx as usize)
                        };
                        images.set(n, c, y, x, v);
                    }
                }
            }
        }
    }
}
