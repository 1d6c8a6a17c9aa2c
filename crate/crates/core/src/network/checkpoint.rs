//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NCCK" | u32 version | u8 dtype tag | u32 entry count
//! per entry: u32 name length | name (UTF-8) | u32 rank | u64 extents[rank] | raw values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_params<T: Scalar>(params: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: {what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint image. Fails on any structural problem or if the
/// stored element type is not `T`.
pub fn decode_params<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let tag = r.take(1, "dtype tag")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {dtype} parameters but the model uses {}",
            T::DTYPE
        )));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let bytes_needed = n
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(bytes_needed, &name)?;
        let data = raw.chunks_exact(dtype.size_of()).map(T::read_le).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_params(&model.params());
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load parameters into `model`. Everything is validated before the first
/// assignment, so on error the model is unchanged.
pub fn load_checkpoint<T: Scalar>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let loaded = decode_params::<T>(&fs::read(path)?)?;
    let current = model.params();
    if loaded.len() != current.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            current.len()
        )));
    }
    for ((ln, lt), (cn, ct)) in loaded.iter().zip(&current) {
        if ln != cn || lt.shape() != ct.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: checkpoint {ln} {:?}, model {cn} {:?}",
                lt.shape(),
                ct.shape()
            )));
        }
    }
    let mut it = loaded.into_iter();
    model.visit_params(&mut |_, w, _| *w = it.next().expect("count checked").1);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::ArchConfig;
    use crate::rng::Rng;
    use crate::tensor::randn;

    fn small() -> crate::network::spec::ModelSpec {
        ArchConfig {
            widths: vec![4, 8],
            ..ArchConfig::default()
        }
        .to_spec([3, 8, 8])
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = Model::<f32>::build(small(), &mut Rng::new(1)).unwrap();
        save_checkpoint(&mut a, &path).unwrap();
        let mut b = Model::<f32>::build(small(), &mut Rng::new(2)).unwrap();
        assert_ne!(a.params(), b.params());
        load_checkpoint(&mut b, &path).unwrap();
        assert_eq!(a.params(), b.params());
        let x = randn(&[2, 3, 8, 8], &mut Rng::new(3), 0.0, 1.0);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn truncated_file_leaves_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = Model::<f64>::build(small(), &mut Rng::new(1)).unwrap();
        save_checkpoint(&mut a, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let mut b = Model::<f64>::build(small(), &mut Rng::new(2)).unwrap();
        let before = b.params();
        let err = load_checkpoint(&mut b, &path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert_eq!(b.params(), before);
    }

    #[test]
    fn cross_dtype_load_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = Model::<f64>::build(small(), &mut Rng::new(1)).unwrap();
        save_checkpoint(&mut a, &path).unwrap();
        let mut b = Model::<f32>::build(small(), &mut Rng::new(1)).unwrap();
        let err = load_checkpoint(&mut b, &path).unwrap_err();
        assert!(err.to_string().contains("f64"), "{err}");
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = Model::<f32>::build(small(), &mut Rng::new(1)).unwrap();
        save_checkpoint(&mut a, &path).unwrap();
        let other = ArchConfig {
            widths: vec![4, 16],
            ..ArchConfig::default()
        }
        .to_spec([3, 8, 8])
        .unwrap();
        let mut b = Model::<f32>::build(other, &mut Rng::new(1)).unwrap();
        assert!(matches!(load_checkpoint(&mut b, &path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn header_layout() {
        let p = vec![("w".to_string(), Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap())];
        let b = encode_params(&p);
        assert_eq!(&b[..4], b"NCCK");
        assert_eq!(b[8], 0);
        assert_eq!(b.len(), 4 + 4 + 1 + 4 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(decode_params::<f32>(&b).unwrap(), p);
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(decode_params::<f32>(&bad).unwrap_err().to_string().contains("version"));
    }
}
