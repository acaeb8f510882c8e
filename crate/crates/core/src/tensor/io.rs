//! The `CSTY` binary tensor format.
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"CSTY"
//! 4       4         format version (u32 LE), currently 1
//! 8       4         rank (u32 LE)
//! 12      8·rank    dims (u64 LE each)
//! ..      4·Πdims   row-major f32 LE payload
//! ```

use std::fs;
use std::path::Path;

use super::{FeatureTensor, Matrix};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSTY";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

/// A decoded tensor of any rank.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Decodes a `CSTY` buffer; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let corrupt = |offset: usize, reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let take = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(offset..offset + len)
            .ok_or_else(|| corrupt(bytes.len(), format!("truncated: need {len} bytes at offset {offset}")))
    };

    if take(0, 4)? != MAGIC {
        return Err(corrupt(0, "bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(corrupt(8, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut offset = 12;
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(offset, 8)?.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| corrupt(offset, format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| corrupt(offset, "element count overflows".into()))?;
        dims.push(d);
        offset += 8;
    }
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(offset))
        .ok_or_else(|| corrupt(offset, "payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(corrupt(
            bytes.len().min(expected),
            format!(
                "payload is {} bytes, dims require {}",
                bytes.len() - offset.min(bytes.len()),
                expected - offset
            ),
        ));
    }
    let data = bytes[offset..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawTensor { dims, data })
}

pub fn write(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    fs::write(path, encode(dims, data)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

impl Matrix {
    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.shape(), self.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = read(path)?;
        match raw.dims.as_slice() {
            &[rows, cols] => Matrix::new(rows, cols, raw.data),
            other => Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: 8,
                reason: format!("expected rank 2, found dims {other:?}"),
            }),
        }
    }
}

impl FeatureTensor {
    /// Saves as rank 4 `[B, H, W, d]` so the grid survives the round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.dims(), self.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = read(path)?;
        match raw.dims.as_slice() {
            &[b, h, w, d] => FeatureTensor::new(b, (h, w), d, raw.data),
            other => Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: 8,
                reason: format!("expected rank 4, found dims {other:?}"),
            }),
        }
    }
}
