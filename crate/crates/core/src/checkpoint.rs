//! Named-tensor checkpoint files.
//!
//! Layout: the magic `MOVGCKPT`, a little-endian `u64` header length, a JSON
//! header, then the raw little-endian tensor bytes. The header carries the
//! format version, free-form metadata, and for every tensor its name, dtype,
//! shape and byte range.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"MOVGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Tensors of a checkpoint keyed by name, plus its metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    Ok(match dtype {
        DType::F32 => "f32",
        DType::F64 => "f64",
        other => return Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter of `store` under `prefix/name`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, var) in store.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), var.as_tensor().clone());
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let dtype = dtype_name(t.dtype())?;
            let flat = t.flatten_all()?;
            let offset = data.len();
            match t.dtype() {
                DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype.to_string(),
                shape: t.dims().to_vec(),
                offset,
                len: data.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write to a sibling file first so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(MAGIC)
            .and_then(|_| f.write_all(&(header.len() as u64).to_le_bytes()))
            .and_then(|_| f.write_all(&header))
            .and_then(|_| f.write_all(&data))
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fail(path, "not a checkpoint file"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| fail(path, format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fail(
                path,
                format!(
                    "format version {} is not supported (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            ));
        }
        let body = &bytes[body_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let raw = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= body.len())
                .map(|end| &body[e.offset..end])
                .ok_or_else(|| fail(path, format!("tensor `{}` lies outside the file", e.name)))?;
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(fail(path, format!("tensor `{}` has unknown dtype {other}", e.name))),
            };
            if raw.len() != n * width {
                return Err(fail(
                    path,
                    format!("tensor `{}` holds {} bytes for shape {:?}", e.name, raw.len(), e.shape),
                ));
            }
            let dev = &Device::Cpu;
            let tensor = match width {
                4 => Tensor::from_vec(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect::<Vec<_>>(),
                    e.shape.as_slice(),
                    dev,
                )?,
                _ => Tensor::from_vec(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect::<Vec<_>>(),
                    e.shape.as_slice(),
                    dev,
                )?,
            };
            tensors.insert(e.name, tensor);
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    /// Copies `prefix/name` tensors into `store`, requiring every parameter to
    /// be present with exactly the stored shape.
    pub fn restore_store(&self, prefix: &str, store: &ParamStore, path: &Path) -> Result<()> {
        for (name, var) in store.iter() {
            let key = format!("{prefix}/{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| fail(path, format!("missing tensor `{key}`")))?;
            if t.dims() != var.dims() {
                return Err(fail(
                    path,
                    format!("tensor `{key}` has shape {:?}, expected {:?}", t.dims(), var.dims()),
                ));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}
