//! File helpers: atomic writes, checksums and the named-tensor file format.
//!
//! Tensor files use the safetensors layout: an 8-byte little-endian header
//! length, a JSON header mapping names to dtype/shape/byte ranges (plus an
//! optional `__metadata__` string map), then the raw little-endian data.
//! Keys are written in sorted order so identical contents give identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert("__metadata__".into(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.len() * 4;
            header.insert(
                name.clone(),
                json!({"dtype": "F32", "shape": t.shape(), "data_offsets": [offset, offset + len]}),
            );
            offset += len;
        }
        // serde_json's map is ordered by key
        let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header");
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    /// Parses a tensor file. Non-F32 entries (e.g. integer step counters)
    /// are listed in `skipped` rather than rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Vec<String>), String> {
        if bytes.len() < 8 {
            return Err("file shorter than its header length field".into());
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or("header length exceeds file size")?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| format!("bad header: {e}"))?;
        let data = &bytes[header_end..];
        let mut file = TensorFile::default();
        let mut skipped = Vec::new();
        for (name, entry) in header {
            if name == "__metadata__" {
                if let Value::Object(meta) = entry {
                    for (k, v) in meta {
                        if let Value::String(s) = v {
                            file.metadata.insert(k, s);
                        }
                    }
                }
                continue;
            }
            let dtype = entry["dtype"].as_str().ok_or_else(|| format!("{name}: missing dtype"))?;
            if dtype != "F32" {
                skipped.push(name);
                continue;
            }
            let shape: Vec<usize> = entry["shape"]
                .as_array()
                .ok_or_else(|| format!("{name}: missing shape"))?
                .iter()
                .map(|v| v.as_u64().map(|x| x as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| format!("{name}: bad shape"))?;
            let offs = entry["data_offsets"]
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| format!("{name}: missing data_offsets"))?;
            let (b, e) = (
                offs[0].as_u64().unwrap_or(u64::MAX) as usize,
                offs[1].as_u64().unwrap_or(u64::MAX) as usize,
            );
            if b > e || e > data.len() {
                return Err(format!("{name}: data range {b}..{e} out of bounds"));
            }
            let t = Tensor::from_le_bytes(&shape, &data[b..e]).map_err(|e| format!("{name}: {e}"))?;
            file.tensors.insert(name, t);
        }
        Ok((file, skipped))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> io::Result<(Self, Vec<String>)> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}
