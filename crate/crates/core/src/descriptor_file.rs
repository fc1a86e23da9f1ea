//! Binary descriptor batches.
//!
//! ```text
//! magic  "GIFTDESC1"
//! u64    record count
//! u64    descriptor dimension
//! per record: f64 x, f64 y, dim x f64 values (all little-endian)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::Descriptor;

pub const MAGIC: &[u8; 9] = b"GIFTDESC1";
const HEADER: usize = MAGIC.len() + 16;

pub fn to_bytes(descriptors: &[Descriptor], dim: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER + descriptors.len() * (dim + 2) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(descriptors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for d in descriptors {
        if d.values.len() != dim {
            return Err(Error::shape("descriptor file", format!("descriptor of length {} in a {dim}-d batch", d.values.len())));
        }
        for v in [d.point.0, d.point.1].iter().chain(&d.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Returns the descriptors and their dimension. Degenerate flags are
/// recomputed from the values (all-zero rows).
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Vec<Descriptor>, usize)> {
    let corrupt = |offset: usize, reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let at = bytes.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(bytes.len().min(MAGIC.len()));
        return Err(corrupt(at, "bad magic".into()));
    }
    if bytes.len() < HEADER {
        return Err(corrupt(bytes.len(), "truncated header".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let (count, dim) = (u64_at(MAGIC.len()), u64_at(MAGIC.len() + 8));
    let record = dim.checked_add(2).and_then(|r| r.checked_mul(8));
    let body = record.and_then(|r| r.checked_mul(count)).and_then(|b| b.checked_add(HEADER as u64));
    match body {
        None => return Err(corrupt(MAGIC.len(), format!("implausible header: {count} records of dimension {dim}"))),
        Some(total) if total > bytes.len() as u64 => {
            let record = record.expect("checked") as usize;
            let whole = (bytes.len() - HEADER) / record;
            return Err(corrupt(
                HEADER + whole * record,
                format!("truncated: header promises {count} records, {whole} present"),
            ));
        }
        Some(total) if total < bytes.len() as u64 => {
            return Err(corrupt(total as usize, "trailing bytes after last record".into()));
        }
        Some(_) => {}
    }
    let (count, dim) = (count as usize, dim as usize);
    let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let descriptors = (0..count)
        .map(|r| {
            let o = HEADER + r * (dim + 2) * 8;
            let values: Vec<f64> = (0..dim).map(|k| f(o + 16 + 8 * k)).collect();
            Descriptor {
                degenerate: values.iter().all(|&v| v == 0.0),
                values,
                point: (f(o), f(o + 8)),
            }
        })
        .collect();
    Ok((descriptors, dim))
}

pub fn save(path: impl AsRef<Path>, descriptors: &[Descriptor], dim: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(descriptors, dim)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Vec<Descriptor>, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
