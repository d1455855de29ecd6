//! Shared helpers for the JSON/binary checkpoint formats: base64 packed
//! little-endian float arrays and byte offsets for parse errors.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for &v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_bytes(text: &str, field: &str, encoded: &str, width: usize) -> Result<Vec<u8>> {
    let bytes = STANDARD
        .decode(encoded)
        .map_err(|e| Error::parse(value_offset(text, encoded), format!("field {field}: invalid base64 ({e})")))?;
    if bytes.len() % width != 0 {
        return Err(Error::parse(
            value_offset(text, encoded),
            format!("field {field}: {} bytes is not a whole number of {width}-byte values", bytes.len()),
        ));
    }
    Ok(bytes)
}

/// Decodes a base64 f32 array; `text` is the enclosing document, used to
/// report the byte offset of a malformed value.
pub fn decode_f32(text: &str, field: &str, encoded: &str, expected_len: Option<usize>) -> Result<Vec<f64>> {
    let bytes = decode_bytes(text, field, encoded, 4)?;
    let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    check_values(text, field, encoded, &values, expected_len)?;
    Ok(values)
}

pub fn decode_f64(text: &str, field: &str, encoded: &str, expected_len: Option<usize>) -> Result<Vec<f64>> {
    let bytes = decode_bytes(text, field, encoded, 8)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    check_values(text, field, encoded, &values, expected_len)?;
    Ok(values)
}

fn check_values(text: &str, field: &str, encoded: &str, values: &[f64], expected_len: Option<usize>) -> Result<()> {
    if let Some(n) = expected_len {
        if values.len() != n {
            return Err(Error::parse(
                value_offset(text, encoded),
                format!("field {field}: expected {n} values, found {}", values.len()),
            ));
        }
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(value_offset(text, encoded), format!("field {field}: non-finite value at index {i}")));
    }
    Ok(())
}

/// Byte offset of `value` inside `text` (0 when not found).
pub fn value_offset(text: &str, value: &str) -> usize {
    if value.is_empty() {
        return 0;
    }
    text.find(value).unwrap_or(0)
}

/// Byte offset of the first occurrence of `"key"` inside `text`.
pub fn key_offset(text: &str, key: &str) -> usize {
    text.find(&format!("\"{key}\"")).unwrap_or(0)
}

/// Converts a serde_json line/column position into a byte offset.
pub fn json_error(text: &str, err: &serde_json::Error) -> Error {
    let line = err.line();
    let column = err.column();
    let mut offset = 0usize;
    if line > 0 {
        for (i, l) in text.split_inclusive('\n').enumerate() {
            if i + 1 == line {
                offset += column.saturating_sub(1).min(l.len());
                break;
            }
            offset += l.len();
        }
    }
    Error::parse(offset.min(text.len()), err.to_string())
}

pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| json_error(text, &e))
}
