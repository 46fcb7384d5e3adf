//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic `SFADASEG`, u32 LE format version, four u32 LE channel
//! counts (enc1, enc2, dec1, dec2), u64 LE parameter count, then the
//! parameters as f64 LE in the flat layout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{ChannelSpec, SegmenterParams};

pub const MAGIC: &[u8; 8] = b"SFADASEG";
pub const VERSION: u32 = 1;

pub fn encode(params: &SegmenterParams) -> Vec<u8> {
    let spec = params.spec();
    let mut out = Vec::with_capacity(36 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for c in [spec.enc1, spec.enc2, spec.dec1, spec.dec2] {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<SegmenterParams> {
    let bad = |d: &str| Error::format("checkpoint", d.to_string());
    if bytes.len() < 36 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let spec = ChannelSpec {
        enc1: u32_at(12) as usize,
        enc2: u32_at(16) as usize,
        dec1: u32_at(20) as usize,
        dec2: u32_at(24) as usize,
    };
    let count = u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes")) as usize;
    let body = &bytes[36..];
    if count != spec.param_count() || body.len() != 8 * count {
        return Err(bad("parameter count does not match channel spec"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    SegmenterParams::from_flat(spec, values)
}

pub fn save(params: &SegmenterParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SegmenterParams> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
