//! Binary array container: a JSON header followed by a little-endian `f32` payload.
//!
//! Layout: the 4-byte magic `DMAF`, a `u32` little-endian header length `n`, `n` bytes of
//! UTF-8 JSON (an object), then the payload as consecutive little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DMAF";

pub fn write_array_file(path: &Path, header: &Map<String, Value>, payload: &[f32]) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_array_file`]. Errors carry a plain reason string so callers
/// can wrap them in their own context.
pub fn read_array_file(path: &Path) -> Result<(Map<String, Value>, Vec<f32>), String> {
    let mut r = BufReader::new(File::open(path).map_err(|e| e.to_string())?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| "truncated magic".to_string())?;
    if &magic != MAGIC {
        return Err("bad magic".into());
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| "truncated header length".to_string())?;
    let len = u32::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|_| "truncated header".to_string())?;
    let header: Value = serde_json::from_slice(&header).map_err(|e| format!("header is not JSON: {e}"))?;
    let Value::Object(header) = header else {
        return Err("header is not a JSON object".into());
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("payload length {} is not a multiple of 4", bytes.len()));
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

pub fn header_usize(header: &Map<String, Value>, key: &str) -> Result<usize, String> {
    header
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| format!("header field {key:?} missing or not an unsigned integer"))
}

/// Writes a matrix with `{kind, rows, cols}` header, row-major.
pub fn write_matrix<T: Scalar>(path: &Path, kind: &str, m: &Array2<T>) -> Result<()> {
    let mut header = Map::new();
    header.insert("kind".into(), Value::from(kind));
    header.insert("rows".into(), Value::from(m.nrows()));
    header.insert("cols".into(), Value::from(m.ncols()));
    let payload: Vec<f32> = m.iter().map(|v| v.as_f64() as f32).collect();
    write_array_file(path, &header, &payload)
}

pub fn read_matrix<T: Scalar>(path: &Path, kind: &str) -> Result<Array2<T>, String> {
    let (header, payload) = read_array_file(path)?;
    match header.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => {}
        other => return Err(format!("expected kind {kind:?}, found {other:?}")),
    }
    let rows = header_usize(&header, "rows")?;
    let cols = header_usize(&header, "cols")?;
    if rows * cols != payload.len() {
        return Err(format!("header declares {rows}x{cols} but payload holds {} values", payload.len()));
    }
    Array2::from_shape_vec((rows, cols), payload.into_iter().map(|v| T::lit(v as f64)).collect())
        .map_err(|e| e.to_string())
}

pub(crate) fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptTake {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Array2::from_shape_fn((7, 3), |(i, j)| (i as f32 * 0.1 - j as f32).sin() * 1e-3);
        write_matrix(&path, "motion", &m).unwrap();
        let back: Array2<f32> = read_matrix(&path, "motion").unwrap();
        assert_eq!(m, back);
        assert!(read_matrix::<f32>(&path, "face").is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix(&path, "x", &Array2::<f32>::ones((2, 2))).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_matrix::<f32>(&path, "x").is_err());
    }
}
