//! Tensor container file: one UTF-8 JSON header line followed by the
//! concatenated row-major little-endian `f32` payloads.
//!
//! The header is a JSON object carrying arbitrary metadata keys plus a
//! `tensors` manifest of `{name, rows, cols, offset}` entries, where `offset`
//! is the byte offset of the tensor's payload counted from the first byte
//! after the newline.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload error: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    /// Header keys other than `tensors`.
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

pub fn write<W: Write>(mut out: W, meta: &Map<String, Value>, tensors: &[(&str, &Matrix)]) -> Result<(), ContainerError> {
    let mut header = meta.clone();
    let mut offset = 0u64;
    let mut manifest = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        manifest.push(TensorEntry { name: name.to_string(), rows: m.rows(), cols: m.cols(), offset });
        offset += 4 * m.len() as u64;
    }
    header.insert("tensors".into(), serde_json::to_value(&manifest).expect("manifest serializes"));
    let line = serde_json::to_string(&Value::Object(header)).map_err(|e| ContainerError::Header(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    for (_, m) in tensors {
        let mut buf = Vec::with_capacity(4 * m.len());
        for &v in m.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read<R: Read>(input: R) -> Result<Container, ContainerError> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(ContainerError::Header("missing header terminator".into()));
    }
    let mut header: Map<String, Value> = match serde_json::from_str(line.trim_end_matches('\n')) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(ContainerError::Header("header is not a JSON object".into())),
        Err(e) => return Err(ContainerError::Header(e.to_string())),
    };
    let manifest: Vec<TensorEntry> = header
        .remove("tensors")
        .ok_or_else(|| ContainerError::Header("missing tensor manifest".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| ContainerError::Header(e.to_string())))?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(manifest.len());
    let mut expected = 0u64;
    for e in manifest {
        if e.offset != expected {
            return Err(ContainerError::Payload(format!("tensor {} at offset {} (expected {expected})", e.name, e.offset)));
        }
        let n = e.rows * e.cols;
        let start = e.offset as usize;
        let end = start + 4 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| ContainerError::Payload(format!("tensor {} runs past end of file", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Matrix::from_vec(e.rows, e.cols, data).map_err(|err| ContainerError::Payload(err.to_string()))?;
        tensors.push((e.name, m));
        expected = end as u64;
    }
    if expected as usize != payload.len() {
        return Err(ContainerError::Payload(format!("{} trailing bytes", payload.len() - expected as usize)));
    }
    Ok(Container { meta: header, tensors })
}

pub fn write_file(path: &Path, meta: &Map<String, Value>, tensors: &[(&str, &Matrix)]) -> Result<(), ContainerError> {
    let mut buf = Vec::new();
    write(&mut buf, meta, tensors)?;
    crate::io::write_atomic(path, &buf)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Container, ContainerError> {
    read(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_offsets() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.5]]).unwrap();
        let b = Matrix::row_vector(&[-1.0, 0.25, 8.0]);
        let mut meta = Map::new();
        meta.insert("positions_seen".into(), Value::from(7));
        let mut buf = Vec::new();
        write(&mut buf, &meta, &[("A", &a), ("b", &b)]).unwrap();

        let nl = buf.iter().position(|&c| c == b'\n').unwrap();
        let header: Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["tensors"][1]["offset"], 16);
        assert_eq!(header["tensors"][1]["cols"], 3);
        assert_eq!(buf.len() - nl - 1, 4 * 7);
        assert_eq!(&buf[nl + 1..nl + 5], &1.0f32.to_le_bytes());

        let back = read(&buf[..]).unwrap();
        assert_eq!(back.meta["positions_seen"], 7);
        assert_eq!(back.get("A").unwrap(), &a);
        assert_eq!(back.get("b").unwrap(), &b);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = Matrix::identity(3);
        let mut buf = Vec::new();
        write(&mut buf, &Map::new(), &[("a", &a)]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read(&buf[..]), Err(ContainerError::Payload(_))));
        assert!(matches!(read(&b"{}"[..]), Err(ContainerError::Header(_))));
    }
}
