//! `SSPTENS1` container: 8-byte magic, little-endian `u32` rank, `u32`
//! extents, then the raw little-endian `f64` payload.

use std::path::Path;

use super::Tensor;
use crate::error::{Result, SspError};

pub const MAGIC: &[u8; 8] = b"SSPTENS1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode a container; `origin` names the source in error messages.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |msg: &str| SspError::format(origin, msg);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic, expected SSPTENS1"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let rank = u32_at(8);
    let header = 12 + 4 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(fail("truncated shape header"));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(12 + 4 * i)).collect();
    let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
    let payload = &bytes[header..];
    match numel {
        Some(n) if n > 0 && payload.len() == n * 8 => {}
        _ => {
            return Err(fail(&format!(
                "payload of {} bytes does not match shape {shape:?}",
                payload.len()
            )))
        }
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| SspError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SspError::Missing(path.to_path_buf())
        } else {
            SspError::io(path, e)
        }
    })?;
    decode_tensor(&bytes, path)
}
