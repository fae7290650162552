//! SGT tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SGT1"            4 bytes magic
//! rank              u8
//! dims              rank × u32
//! payload           product(dims) × f64
//! crc32(payload)    u32
//! ```
//!
//! A rank-0 file holds a single scalar.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let rank = t.rank();
    assert!(rank <= u8::MAX as usize, "rank {rank} does not fit the SGT header");
    let mut out = Vec::with_capacity(4 + 1 + 4 * rank + 8 * t.numel() + 4);
    out.extend_from_slice(MAGIC);
    out.push(rank as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).expect("extent exceeds u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    let payload_start = out.len();
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses an SGT byte buffer. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |msg: String| Error::format(path, msg);
    if bytes.len() < 5 {
        return Err(err(format!("file too short for header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(format!("bad magic {:?}, expected \"SGT1\"", &bytes[..4])));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(err(format!(
            "truncated header: expected at least {header} bytes, found {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(err(format!("zero extent in dims {dims:?}")));
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |n, &d| n.checked_mul(d))
        .filter(|n| n.checked_mul(8).and_then(|b| b.checked_add(header + 4)).is_some())
        .ok_or_else(|| err(format!("dims {dims:?} overflow the addressable size")))?;
    let expected = header + 8 * numel + 4;
    if bytes.len() != expected {
        return Err(err(format!(
            "size mismatch: dims {dims:?} require {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[header..header + 8 * numel];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(err(format!("CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_sgt(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_sgt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}
