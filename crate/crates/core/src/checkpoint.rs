//! Self-describing model checkpoints: a JSON header followed by a raw
//! little-endian `f64` parameter blob.
//!
//! ```text
//! b"DCKPT\0v1"  | u64 header_len | header JSON | u64 n_params | n_params x f64
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DCKPT\0v1";

pub fn write_checkpoint<H: Serialize>(path: &Path, header: &H, params: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(24 + header.len() + 8 * params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend((header.len() as u64).to_le_bytes());
    bytes.extend(&header);
    bytes.extend((params.len() as u64).to_le_bytes());
    for p in params {
        bytes.extend(p.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("checkpoint {}", path.display())),
        _ => Error::Io(e),
    })?;
    let bad = |m: &str| Error::Parse { path: path.to_path_buf(), message: m.to_string() };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let read_u64 = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated checkpoint"))
    };
    let hlen = read_u64(8)? as usize;
    let hend = 16usize.checked_add(hlen).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: H = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&e.to_string()))?;
    let n = read_u64(hend)? as usize;
    let body = &bytes[hend + 8..];
    if body.len() != n * 8 {
        return Err(bad("parameter blob length mismatch"));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, params))
}
