//! Reader for the CIFAR-10 binary distribution.
//!
//! Each file is a sequence of 3073-byte records: one label byte followed by
//! 1024 red, 1024 green and 1024 blue pixel bytes, each plane row-major
//! over 32×32.

use std::fs;
use std::path::Path;

use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const RECORDS_PER_FILE: usize = 10_000;
pub const RECORD_BYTES: usize = 1 + PIXELS;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const CLASSES: usize = 10;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Label and pixels scaled to `[0, 1]` (before standardization).
pub fn decode_record(record: &[u8]) -> Result<(usize, Vec<f64>)> {
    if record.len() != RECORD_BYTES {
        return Err(Error::Format {
            file: "<record>".into(),
            reason: format!("record has {} bytes, expected {RECORD_BYTES}", record.len()),
        });
    }
    let label = record[0] as usize;
    let pixels = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((label, pixels))
}

/// Loads the five training files and the test file from `dir`. The test
/// file becomes the validation split.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(LabeledImageSet, LabeledImageSet)> {
    load_cifar10_records(dir, RECORDS_PER_FILE)
}

/// As [`load_cifar10`] with a custom number of records per file, for
/// reduced fixtures laid out like the real distribution.
pub fn load_cifar10_records(
    dir: impl AsRef<Path>,
    records_per_file: usize,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let dir = dir.as_ref();
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for name in TRAIN_FILES {
        read_file(&dir.join(name), records_per_file, &mut train_pixels, &mut train_labels)?;
    }
    let mut val_pixels = Vec::new();
    let mut val_labels = Vec::new();
    read_file(&dir.join(TEST_FILE), records_per_file, &mut val_pixels, &mut val_labels)?;
    Ok((
        build_set(train_pixels, train_labels, Split::Train)?,
        build_set(val_pixels, val_labels, Split::Val)?,
    ))
}

fn read_file(
    path: &Path,
    records: usize,
    pixels: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let file = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: file.clone(),
        reason: e.to_string(),
    })?;
    let expected = records * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::Format {
            file,
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    pixels.reserve(records * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                file,
                reason: format!("record {i} has label {label}, expected 0..{CLASSES}"),
            });
        }
        labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(SIDE * SIDE).enumerate() {
            let (m, s) = (CIFAR10_MEAN[c], CIFAR10_STD[c]);
            pixels.extend(plane.iter().map(|&b| (b as f64 / 255.0 - m) / s));
        }
    }
    Ok(())
}

fn build_set(pixels: Vec<f64>, labels: Vec<usize>, split: Split) -> Result<LabeledImageSet> {
    let images = Tensor4::from_vec(Shape4::new(labels.len(), 3, SIDE, SIDE), pixels)?;
    LabeledImageSet::new(images, labels, CLASSES, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; RECORD_BYTES];
        r[0] = label;
        r
    }

    #[test]
    fn label_byte_and_pixel_scaling() {
        let (label, px) = decode_record(&record(7, 255)).unwrap();
        assert_eq!(label, 7);
        assert!(px.iter().all(|&p| p == 1.0));
        let (_, px) = decode_record(&record(0, 0)).unwrap();
        assert!(px.iter().all(|&p| p == 0.0));
        assert!(decode_record(&[0u8; 10]).is_err());
    }

    #[test]
    fn wrong_size_names_file_and_expected_bytes() {
        let dir = tempfile::tempdir().unwrap();
        for name in TRAIN_FILES.iter().chain([&TEST_FILE]) {
            fs::write(dir.path().join(name), record(1, 10).repeat(2)).unwrap();
        }
        fs::write(dir.path().join("data_batch_3.bin"), vec![0u8; 100]).unwrap();
        let err = load_cifar10_records(dir.path(), 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data_batch_3.bin"), "{msg}");
        assert!(msg.contains(&(2 * RECORD_BYTES).to_string()), "{msg}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn standardization_constants_applied_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = record(3, 0);
        // Red plane 255, green 0, blue 51.
        rec[1..1025].fill(255);
        rec[2049..].fill(51);
        for name in TRAIN_FILES.iter().chain([&TEST_FILE]) {
            fs::write(dir.path().join(name), &rec).unwrap();
        }
        let (train, val) = load_cifar10_records(dir.path(), 1).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(val.len(), 1);
        assert_eq!(val.split, Split::Val);
        let img = &val.images;
        assert_eq!(img.at(0, 0, 5, 5), (1.0 - 0.4914) / 0.2470);
        assert_eq!(img.at(0, 1, 0, 31), (0.0 - 0.4822) / 0.2435);
        assert_eq!(img.at(0, 2, 31, 0), (0.2 - 0.4465) / 0.2616);
        assert_eq!(val.labels, vec![3]);
    }
}
