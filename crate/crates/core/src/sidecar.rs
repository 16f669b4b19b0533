//! Dense float32 matrices stored next to JSON metadata.
//!
//! Layout: one line of UTF-8 JSON (the preamble) terminated by `\n`, followed
//! by `count * dim` little-endian `f32` values in row-major order. The preamble
//! must carry `dim` and `count`; everything else is up to the caller (slide
//! embedding files add `ids`, case banks add `sha256`).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub preamble: Map<String, Value>,
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

pub fn payload_bytes(rows: &[Vec<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.iter().map(|r| r.len() * 4).sum());
    for row in rows {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes atomically (temp file + rename). `dim` and `count` in the preamble
/// are overwritten from the data.
pub fn write(path: &Path, mut preamble: Map<String, Value>, dim: usize, rows: &[Vec<f32>]) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    preamble.insert("dim".into(), Value::from(dim));
    preamble.insert("count".into(), Value::from(rows.len()));
    let header = serde_json::to_string(&Value::Object(preamble)).expect("map serializes");

    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .and_then(|_| file.write_all(&payload_bytes(rows)))
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Sidecar> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::CorruptBank {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Sidecar, String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing preamble terminator")?;
    let preamble: Map<String, Value> =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| format!("bad preamble: {e}"))?;
    let dim = preamble
        .get("dim")
        .and_then(Value::as_u64)
        .ok_or("preamble lacks `dim`")? as usize;
    let count = preamble
        .get("count")
        .and_then(Value::as_u64)
        .ok_or("preamble lacks `count`")? as usize;
    let payload = &bytes[nl + 1..];
    let expected = dim * count * 4;
    if payload.len() != expected {
        return Err(format!(
            "payload has {} bytes, preamble promises {expected}",
            payload.len()
        ));
    }
    let rows = payload
        .chunks_exact(4 * dim.max(1))
        .take(count)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect::<Vec<Vec<f32>>>();
    let rows = if dim == 0 { vec![Vec::new(); count] } else { rows };
    Ok(Sidecar {
        preamble,
        dim,
        rows,
    })
}
