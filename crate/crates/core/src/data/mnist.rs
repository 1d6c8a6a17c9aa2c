//! MNIST in IDX format (uncompressed).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn format_err(path: &Path, reason: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason,
    }
}

fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(format_err(path, format!("header needs 16 bytes, found {}", bytes.len())));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let (n, h, w) = (be_u32(&bytes, 4) as usize, be_u32(&bytes, 8) as usize, be_u32(&bytes, 12) as usize);
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(format_err(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok((n, h, w, bytes[16..].iter().map(|&b| b as f32 / 255.0).collect()))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(format_err(path, format!("header needs 8 bytes, found {}", bytes.len())));
    }
    let magic = be_u32(&bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(path, format!("expected {} bytes, found {}", 8 + n, bytes.len())));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn load_pair(dir: &Path, images: &str, labels: &str, name: &str) -> Result<Dataset> {
    let ipath = dir.join(images);
    let (n, h, w, pixels) = read_images(&ipath)?;
    let labels = read_labels(&dir.join(labels))?;
    if labels.len() != n {
        return Err(format_err(&ipath, format!("{n} images but {} labels", labels.len())));
    }
    Dataset::new(name, Tensor::new(&[n, 1, h, w], pixels)?, labels, 10)
}

/// Load `train-*` and `t10k-*` IDX files from `dir`.
pub fn load_mnist_idx(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((
        load_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", "mnist-train")?,
        load_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "mnist-test")?,
    ))
}

pub fn write_idx_images(path: impl AsRef<Path>, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), n * h * w);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_set(dir: &Path, prefix: &str, n: usize) {
        let pixels: Vec<u8> = (0..n * 28 * 28).map(|v| (v % 256) as u8).collect();
        write_idx_images(dir.join(format!("{prefix}-images-idx3-ubyte")), n, 28, 28, &pixels).unwrap();
        let labels: Vec<u8> = (0..n).map(|v| (v % 10) as u8).collect();
        write_idx_labels(dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels).unwrap();
    }

    #[test]
    fn parses_dims_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), "train", 5);
        write_set(dir.path(), "t10k", 3);
        let (train, test) = load_mnist_idx(dir.path()).unwrap();
        assert_eq!(train.images.shape(), &[5, 1, 28, 28]);
        assert_eq!(test.len(), 3);
        assert_eq!(train.labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(train.image(0)[255], 1.0);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), "train", 2);
        write_set(dir.path(), "t10k", 2);
        let p = dir.path().join("train-labels-idx1-ubyte");
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] = 0x03;
        fs::write(&p, bytes).unwrap();
        let err = load_mnist_idx(dir.path()).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), "train", 2);
        write_set(dir.path(), "t10k", 2);
        let p = dir.path().join("t10k-images-idx3-ubyte");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_mnist_idx(dir.path()), Err(Error::Format { .. })));
    }
}
