//! Binary row-matrix files for per-proposal feature channels.
//!
//! Layout: the 8-byte magic `FDMAT01\n`, row count and column count as
//! little-endian `u64`, then row-major little-endian `f64` values.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FDMAT01\n";

pub fn encode_matrix(rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            expected: cols,
            got: bad.len(),
        });
    }
    let mut out = Vec::with_capacity(24 + rows.len() * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for r in rows {
        for v in r {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<Vec<Vec<f64>>, String> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err("not a feature matrix file".into());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (word(8), word(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(24))
        .ok_or("matrix dimensions overflow")?;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()));
    }
    Ok(bytes[24..]
        .chunks_exact(8 * cols.max(1))
        .take(rows)
        .map(|row| {
            row.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        })
        .chain(std::iter::repeat_with(Vec::new).take(if cols == 0 { rows } else { 0 }))
        .collect())
}

pub fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    std::fs::write(path, encode_matrix(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}
