//! Binary checkpoint: `HSTK1` magic, u64 LE header length, JSON header, f32 LE payload.

use std::io::Write;
use std::path::Path;

use mshvit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 5] = b"HSTK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamSet<f32>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(tensors: ParamSet<f32>, metadata: serde_json::Value) -> Self {
        Self { tensors, metadata }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            tensors: entries,
            metadata: self.metadata.clone(),
        })
        .map_err(|e| CoreError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(13 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a checkpoint image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Err(CoreError::Format(m));
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return fail("missing HSTK1 magic".into());
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let body = &bytes[13..];
        if hlen > body.len() as u64 {
            return fail(format!("header length {hlen} exceeds file size"));
        }
        let (hbytes, payload) = body.split_at(hlen as usize);
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| CoreError::Format(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return fail(format!("unsupported version {}", header.version));
        }
        let mut expected = 0u64;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return fail(format!("tensor {} has dtype {}", e.name, e.dtype));
            }
            if e.offset != expected {
                return fail(format!("tensor {} at offset {} overlaps or leaves a gap (expected {expected})", e.name, e.offset));
            }
            let n: usize = e.shape.iter().product();
            expected += 4 * n as u64;
        }
        if expected != payload.len() as u64 {
            return fail(format!("payload is {} bytes, header describes {expected}", payload.len()));
        }
        let mut tensors = ParamSet::new();
        for e in &header.tensors {
            if tensors.get(&e.name).is_some() {
                return fail(format!("duplicate tensor {}", e.name));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let data: Vec<f32> = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    /// Writes via a sibling temporary file and a rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Copies matching tensors into `params` only after every name and shape has been checked.
    pub fn restore_into(&self, params: &mut ParamSet<f32>) -> Result<()> {
        let missing: Vec<String> = params
            .names()
            .iter()
            .filter(|n| self.tensors.get(n).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(CoreError::MissingTensors(missing));
        }
        for (name, t) in params.iter() {
            let have = self.tensors.get(name).unwrap().shape();
            if have != t.shape() {
                return Err(CoreError::Config(format!("tensor {name}: checkpoint {have:?} vs model {:?}", t.shape())));
            }
        }
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            params.insert(&name, self.tensors.get(&name).unwrap().clone());
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix.`, with the prefix removed.
    pub fn prefixed(&self, prefix: &str) -> ParamSet<f32> {
        let p = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (n, t) in self.tensors.iter() {
            if let Some(rest) = n.strip_prefix(&p) {
                out.insert(rest, t.clone());
            }
        }
        out
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let tmp = path.with_file_name(name);
    let written = (|| {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if written.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    written
}

/// Merges sets under `prefix.` names.
pub fn merge_prefixed(parts: &[(&str, &ParamSet<f32>)]) -> ParamSet<f32> {
    let mut out = ParamSet::new();
    for (prefix, set) in parts {
        for (n, t) in set.iter() {
            out.insert(&format!("{prefix}.{n}"), t.clone());
        }
    }
    out
}
