//! `GIFTCKPT1` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GIFTCKPT1"                 9 bytes
//! record count                u32
//! per record:
//!   name length               u32
//!   name                      UTF-8 bytes
//!   rank                      u32
//!   extents                   rank x u64
//!   values                    prod(extents) x f64
//! ```

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"GIFTCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.records.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(r.corrupt(0, "bad magic (expected GIFTCKPT1)"));
        }
        let count = r.u32("record count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.corrupt(at as u64, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.corrupt(at as u64, format!("implausible shape {shape:?}")))?;
            let raw = r.take(n * 8, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos as u64, "trailing bytes after last record"));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: u64, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
