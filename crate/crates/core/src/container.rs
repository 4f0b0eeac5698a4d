//! Binary container shared by checkpoints and dataset caches:
//! 8-byte magic, u64 little-endian header length, UTF-8 JSON header, then raw
//! little-endian tensor payloads in table order.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use meanflow_autodiff::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CoreError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    meta: Value,
    tensors: Vec<TableEntry>,
}

/// One named tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, bytes: Vec<u8>) -> Self {
        Entry {
            name: name.into(),
            dtype,
            shape,
            bytes,
        }
    }

    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Entry::new(name, T::DTYPE, t.shape().to_vec(), t.to_le_bytes())
    }

    pub fn tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(CoreError::InvalidInput(format!(
                "tensor `{}` is {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(Tensor::from_le_bytes(self.shape.clone(), &self.bytes)?)
    }
}

/// Serialize to bytes.
pub fn encode(magic: &[u8; 8], meta: Value, entries: &[Entry]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = entries
        .iter()
        .map(|e| {
            let t = TableEntry {
                name: e.name.clone(),
                dtype: e.dtype,
                shape: e.shape.clone(),
                offset,
                length: e.bytes.len() as u64,
            };
            offset += e.bytes.len() as u64;
            t
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        meta,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in entries {
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

/// Write atomically: a sibling temp file is synced, then renamed into place.
pub fn write(path: &Path, magic: &[u8; 8], meta: Value, entries: &[Entry]) -> Result<()> {
    let bytes = encode(magic, meta, entries)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| CoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn decode(path: &Path, magic: &[u8; 8], bytes: &[u8]) -> Result<(Value, Vec<Entry>)> {
    let corrupt = |reason: String| CoreError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(corrupt(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if hlen > body.len() as u64 {
        return Err(corrupt(format!("header length {hlen} exceeds file size")));
    }
    let (head, payload) = body.split_at(hlen as usize);
    let header: Header =
        serde_json::from_slice(head).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(CoreError::Version {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found: header.version,
        });
    }
    let mut expected_offset = 0u64;
    let mut entries = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let want = t.shape.iter().product::<usize>() as u64 * t.dtype.size_in_bytes() as u64;
        if t.offset != expected_offset || t.length != want {
            return Err(corrupt(format!(
                "tensor `{}` has offset {} and length {}, expected {} and {}",
                t.name, t.offset, t.length, expected_offset, want
            )));
        }
        let end = t.offset + t.length;
        if end > payload.len() as u64 {
            return Err(corrupt(format!("tensor `{}` runs past the end of the file", t.name)));
        }
        expected_offset = end;
        entries.push(Entry {
            bytes: payload[t.offset as usize..end as usize].to_vec(),
            name: t.name,
            dtype: t.dtype,
            shape: t.shape,
        });
    }
    if expected_offset != payload.len() as u64 {
        return Err(corrupt(format!(
            "{} trailing bytes after the last tensor",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok((header.meta, entries))
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<(Value, Vec<Entry>)> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(path, magic, &bytes)
}
