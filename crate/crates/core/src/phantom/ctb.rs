//! CTB1 array blobs.
//!
//! One blob is the magic `CTB1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the row-major values as little-endian
//! `f64`. Files hold blobs back to back; a JSON sidecar records where each
//! blob starts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CTB1";

/// Location of one blob inside a CTB1 file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

pub fn encode(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MAGIC);
    let rank = u32::try_from(t.shape().len()).map_err(|_| Error::Format("dimension overflow".into()))?;
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(8 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).ok_or_else(|| Error::Format("truncated".into()))?;
    let s = bytes.get(*pos..end).ok_or_else(|| Error::Format("truncated".into()))?;
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let s = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
}

/// Decodes the blob at the start of `bytes`; returns it with the number of
/// bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut pos = 0;
    if bytes.len() < 4 {
        return Err(Error::Format("truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    pos += 4;
    let rank = read_u32(bytes, &mut pos)? as usize;
    let header = rank.checked_mul(4).ok_or_else(|| Error::Format("dimension overflow".into()))?;
    if bytes.len() - pos < header {
        return Err(Error::Format("truncated".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, &mut pos)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let nbytes = n.checked_mul(8).ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let raw = take(bytes, &mut pos, nbytes)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((Tensor::from_parts(shape, data)?, pos))
}

/// Writes `arrays` back to back into `path`.
pub fn write_arrays(path: &Path, arrays: &[(String, &Tensor)]) -> Result<Vec<BlobRef>> {
    let mut bytes = Vec::new();
    let mut refs = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        refs.push(BlobRef {
            name: name.clone(),
            offset: bytes.len() as u64,
            shape: t.shape().to_vec(),
        });
        encode(t, &mut bytes)?;
    }
    fs::write(path, bytes)?;
    Ok(refs)
}

/// Reads the blobs listed in `refs`, checking each decoded shape.
pub fn read_arrays(path: &Path, refs: &[BlobRef]) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    refs.iter()
        .map(|r| {
            let start = usize::try_from(r.offset).map_err(|_| Error::Format("truncated".into()))?;
            let tail = bytes.get(start..).ok_or_else(|| Error::Format("truncated".into()))?;
            let (t, _) = decode(tail)?;
            if t.shape() != r.shape.as_slice() {
                return Err(Error::Format(format!(
                    "blob {} has shape {:?}, index says {:?}",
                    r.name,
                    t.shape(),
                    r.shape
                )));
            }
            Ok(t)
        })
        .collect()
}
