//! Bit-packed mask files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes     | field                                  |
//! |-----------|----------------------------------------|
//! | 0..4      | magic `PMSK`                           |
//! | 4..8      | format version (`u32`)                 |
//! | 8..16     | coordinate count `n` (`u64`)           |
//! | 16..16+k  | kept bits, LSB-first, `k = ⌈n/8⌉`     |
//! | ..+k      | prunable bits, same packing            |
//!
//! Padding bits in the final byte of each plane must be zero. The registry
//! travels in a JSON sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PruningMask;
use crate::error::{Error, Result};
use crate::nn::Layout;

pub const MASK_MAGIC: [u8; 4] = *b"PMSK";
pub const MASK_VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSidecar {
    pub format_version: u32,
    pub length: u64,
    pub registry_digest: String,
    pub registry: Layout,
}

fn pack(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack(bytes: &[u8], n: usize, base: usize) -> Result<Vec<bool>> {
    let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    if n % 8 != 0 {
        let last = bytes[bytes.len() - 1];
        if last >> (n % 8) != 0 {
            return Err(Error::data(
                (base + bytes.len() - 1) as u64,
                "non-zero padding bits",
            ));
        }
    }
    Ok(bits)
}

pub fn encode_mask(mask: &PruningMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 2 * mask.len().div_ceil(8));
    out.extend_from_slice(&MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    out.extend(pack(mask.bits()));
    out.extend(pack(mask.prunable()));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<PruningMask> {
    if bytes.len() < HEADER {
        return Err(Error::data(bytes.len() as u64, "truncated mask header"));
    }
    if bytes[..4] != MASK_MAGIC {
        return Err(Error::data(0, "bad mask magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MASK_VERSION {
        return Err(Error::data(4, format!("unsupported mask version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let k = n.div_ceil(8);
    if bytes.len() != HEADER + 2 * k {
        return Err(Error::data(
            bytes.len().min(HEADER + 2 * k) as u64,
            format!("expected {} bytes, found {}", HEADER + 2 * k, bytes.len()),
        ));
    }
    let bits = unpack(&bytes[HEADER..HEADER + k], n, HEADER)?;
    let prunable = unpack(&bytes[HEADER + k..], n, HEADER + k)?;
    PruningMask::from_parts(bits, prunable)
}

/// Writes `path` and `path.json` (the registry sidecar).
pub fn write_mask(path: &Path, mask: &PruningMask, layout: &Layout) -> Result<()> {
    if layout.len() != mask.len() {
        return Err(Error::shape("mask", layout.len(), mask.len()));
    }
    std::fs::write(path, encode_mask(mask))?;
    let sidecar = MaskSidecar {
        format_version: MASK_VERSION,
        length: mask.len() as u64,
        registry_digest: layout.digest(),
        registry: layout.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(PruningMask, Layout)> {
    let mask = decode_mask(&std::fs::read(path)?)?;
    let sidecar: MaskSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    sidecar.registry.validate()?;
    if sidecar.length as usize != mask.len() || sidecar.registry.len() != mask.len() {
        return Err(Error::shape("mask sidecar", mask.len(), sidecar.length));
    }
    if sidecar.registry.digest() != sidecar.registry_digest {
        return Err(Error::invalid("mask sidecar registry digest mismatch"));
    }
    Ok((mask, sidecar.registry))
}

pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
