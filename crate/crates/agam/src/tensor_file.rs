//! `AGT1` raw tensor files: the 4-byte magic, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the row-major payload as
//! little-endian `f32`.

use std::fs;
use std::path::Path;

use agam_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGT1";

/// Serializes `t`, rounding every value to `f32`.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses an `AGT1` byte string; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 8 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"AGT1\"", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let rank = word(4);
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated extents for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i)).collect();
    if shape.contains(&0) {
        return Err(bad(format!("zero extent in shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
