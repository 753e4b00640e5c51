//! `QDTW` parameter files: magic, version, a length-prefixed metadata blob,
//! a manifest of `(name, shape, offset)` entries, then raw little-endian
//! `f32` buffers in manifest order.

use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QDTW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata, typically the model configuration as JSON.
    pub meta: String,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, t) in self.params.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("missing QDTW magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|e| format!("metadata is not UTF-8: {e}"))?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| format!("tensor name is not UTF-8: {e}"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64()?;
            manifest.push((name, shape, offset));
        }
        let data = &bytes[r.pos..];
        let mut params = ParamSet::new();
        let mut expected = 0u64;
        for (name, shape, offset) in manifest {
            let len: usize = shape.iter().product();
            if offset != expected {
                return Err(format!("tensor `{name}` at offset {offset}, expected {expected}"));
            }
            let start = offset as usize;
            let end = start + 4 * len;
            let raw = data
                .get(start..end)
                .ok_or_else(|| format!("tensor `{name}` runs past the end of the file"))?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let tensor = Tensor::new(shape, values).map_err(|e| e.to_string())?;
            params.push(name, tensor).map_err(|e| e.to_string())?;
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected as usize
            ));
        }
        Ok(Self { meta, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| "truncated checkpoint".to_string())?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut rng = rng_from_seed(0);
        let mut params = ParamSet::new();
        params.push("w", Tensor::normal(vec![3, 4], 1.0, &mut rng)).unwrap();
        params.push("b", Tensor::normal(vec![4], 1.0, &mut rng)).unwrap();
        params.push("empty", Tensor::zeros(vec![0])).unwrap();
        let ck = Checkpoint {
            meta: "{\"k\":1}".into(),
            params,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"QDT1").is_err());
    }
}
