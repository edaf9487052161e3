//! Parameter-vector binaries and content digests.
//!
//! Parameter file layout (little-endian):
//!
//! | bytes   | field                              |
//! |---------|------------------------------------|
//! | 0..4    | magic `PVEC`                       |
//! | 4..8    | format version (`u32`)             |
//! | 8..16   | value count (`u64`)                |
//! | 16..24  | registry hash (`u64`)              |
//! | 24..    | values (`f64` each)                |

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Layout, ParamVector};

pub const PARAMS_MAGIC: [u8; 4] = *b"PVEC";
pub const PARAMS_VERSION: u32 = 1;
const HEADER: usize = 24;

pub fn encode_params(p: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * p.len());
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    out.extend_from_slice(&p.layout().hash64().to_le_bytes());
    for v in p.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes against `layout`; the stored registry hash must match.
pub fn decode_params(bytes: &[u8], layout: Arc<Layout>) -> Result<ParamVector> {
    if bytes.len() < HEADER {
        return Err(Error::data(bytes.len() as u64, "truncated parameter header"));
    }
    if bytes[..4] != PARAMS_MAGIC {
        return Err(Error::data(0, "bad parameter magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PARAMS_VERSION {
        return Err(Error::data(4, format!("unsupported parameter version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if n != layout.len() {
        return Err(Error::data(8, format!("expected {} values, header says {n}", layout.len())));
    }
    let hash = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if hash != layout.hash64() {
        return Err(Error::data(16, "registry hash mismatch"));
    }
    let want = HEADER + 8 * n;
    if bytes.len() != want {
        return Err(Error::data(
            bytes.len().min(want) as u64,
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    let values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParamVector::new(layout, values)
}

pub fn write_params(path: &Path, p: &ParamVector) -> Result<()> {
    std::fs::write(path, encode_params(p))?;
    Ok(())
}

pub fn read_params(path: &Path, layout: Arc<Layout>) -> Result<ParamVector> {
    decode_params(&std::fs::read(path)?, layout)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path relative to the directory holding the manifest.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest_file(dir: &Path, rel: &str) -> Result<FileDigest> {
    let data = std::fs::read(dir.join(rel))?;
    Ok(FileDigest {
        path: rel.to_string(),
        sha256: sha256_hex(&data),
        bytes: data.len() as u64,
    })
}

/// Checks every listed file against its recorded digest.
pub fn verify_digests(dir: &Path, files: &[FileDigest]) -> Result<()> {
    for f in files {
        let now = digest_file(dir, &f.path)?;
        if now.sha256 != f.sha256 {
            return Err(Error::data(0, format!("digest mismatch for {}", f.path)));
        }
    }
    Ok(())
}
