//! CIFAR-10 binary batches.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 32x32
//! red plane, then green, then blue, each row-major. That is already
//! `C x H x W` order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + PIXELS;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn read_batches(dir: &Path, files: &[&str], records: usize, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path)?;
        let expected = records * RECORD;
        if bytes.len() != expected {
            return Err(Error::Format {
                path,
                reason: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format {
                    path,
                    reason: format!("label byte {label} out of range"),
                });
            }
            labels.push(label);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(())
}

/// Load the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, CIFAR_RECORDS_PER_FILE)
}

/// As [`load_cifar10`] with a non-standard record count per file.
pub fn load_cifar10_with(dir: impl AsRef<Path>, records_per_file: usize) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let load = |files: &[&str], name: &str| -> Result<Dataset> {
        let mut images = Vec::with_capacity(files.len() * records_per_file * PIXELS);
        let mut labels = Vec::with_capacity(files.len() * records_per_file);
        read_batches(dir, files, records_per_file, &mut images, &mut labels)?;
        let n = labels.len();
        Dataset::new(name, Tensor::new(&[n, 3, SIDE, SIDE], images)?, labels, 10)
    };
    let train = load(&TRAIN_FILES, "cifar10-train")?;
    let test = load(&[TEST_FILE], "cifar10-test")?;
    Ok((train, test))
}

/// Serialize records in the binary batch layout. Pixels are quantized as
/// `round(v * 255)`.
pub fn write_cifar_batch(path: impl AsRef<Path>, images: &[f32], labels: &[usize]) -> Result<()> {
    assert_eq!(images.len(), labels.len() * PIXELS);
    let mut out = Vec::with_capacity(labels.len() * RECORD);
    for (label, img) in labels.iter().zip(images.chunks_exact(PIXELS)) {
        out.push(*label as u8);
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dir(dir: &Path, records: usize) {
        for (f, name) in TRAIN_FILES.iter().chain([TEST_FILE].iter()).enumerate() {
            let labels: Vec<usize> = (0..records).map(|i| (i + f) % 10).collect();
            let images: Vec<f32> = (0..records * PIXELS).map(|v| ((v * 7 + f) % 256) as f32 / 255.0).collect();
            write_cifar_batch(dir.join(name), &images, &labels).unwrap();
        }
    }

    #[test]
    fn small_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 4);
        let (train, test) = load_cifar10_with(dir.path(), 4).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 4);
        assert_eq!(train.images.shape(), &[20, 3, 32, 32]);
        assert_eq!(train.labels[0], 0);
        assert_eq!(train.labels[4], 1);
        // plane order honoured: first pixel of green plane is byte 1 + 1024
        assert_eq!(train.image(0)[1024], ((1024 * 7) % 256) as f32 / 255.0);
    }

    #[test]
    fn truncated_file_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 2);
        let p = dir.path().join("data_batch_3.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        let err = load_cifar10_with(dir.path(), 2).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }));
        assert!(msg.contains("6146") && msg.contains("6145"), "{msg}");
    }

    #[test]
    fn missing_dir_is_io_error() {
        assert!(matches!(load_cifar10("/nonexistent/cifar"), Err(Error::Io(_))));
    }
}
