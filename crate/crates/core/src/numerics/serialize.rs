//! Named tensor files: a JSON sidecar listing `{name, shape, offset, dtype}`
//! per tensor plus a little-endian, row-major binary blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub dtype: DType,
}

/// Sidecar document for a standalone tensor file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndex {
    /// Blob file name, relative to the sidecar's directory.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Encodes tensors into one blob, returning the table of entries.
pub fn encode<T: Real>(tensors: &[(String, Tensor<T>)], dtype: DType) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            dtype,
        });
        for &v in t.data() {
            match dtype {
                DType::F32 => blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
                DType::F64 => blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            }
        }
    }
    (entries, blob)
}

/// Decodes every entry from `blob`.
pub fn decode<T: Real>(entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let w = e.dtype.width();
            let end = e.offset + n * w;
            let bytes = blob.get(e.offset..end).ok_or_else(|| {
                Error::shape(
                    "decode",
                    format!("tensor {} needs bytes {}..{end}, blob has {}", e.name, e.offset, blob.len()),
                )
            })?;
            let data: Vec<T> = bytes
                .chunks_exact(w)
                .map(|c| match e.dtype {
                    DType::F32 => T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                    DType::F64 => T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())),
                })
                .collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}

/// Path of the blob that sits next to a sidecar: `foo.json` → `foo.bin`.
pub fn blob_path_for(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("bin")
}

/// Writes `<path>` (JSON sidecar) and the matching `.bin` blob.
pub fn save_tensor_file<T: Real>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let (entries, blob) = encode(tensors, DType::F32);
    let blob_path = blob_path_for(path);
    let index = TensorIndex {
        blob: file_name(&blob_path),
        tensors: entries,
    };
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_tensor_file<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: TensorIndex = serde_json::from_str(&text)?;
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&index.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode(&index.tensors, &blob)
}

pub(crate) fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
