//! Binary container of named `f32` tensors.
//!
//! Layout (little-endian): magic `TJCK`, version u32, grid hash (u32 length +
//! UTF-8), config text (u32 length + UTF-8), config digest (32 bytes), step
//! u64, tensor count u32, then per tensor: name length u32, name, rank u32,
//! dims u64 each, f32 payload. A SHA-256 of everything before it closes the
//! file.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TJCK";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub grid_hash: String,
    pub config_text: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn config_digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        put_str(&mut out, &self.grid_hash);
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.config_digest());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint container".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Incompatible(format!("container version {version}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let grid_hash = r.string()?;
        let config_text = r.string()?;
        let stored_digest = r.take(32)?.to_vec();
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        let c = Container {
            grid_hash,
            config_text,
            step,
            tensors,
        };
        if c.config_digest().as_slice() != stored_digest {
            return Err(Error::Corrupt("config digest mismatch".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("container truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8 name".into()))
    }
}
