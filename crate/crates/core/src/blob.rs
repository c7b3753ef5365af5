//! Flat tensor-blob persistence: a JSON index (`tensors.json`) describing named tensors at
//! byte offsets inside a single little-endian `f32` file (`tensors.bin`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOB_SCHEMA_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "tensors.json";
pub const DATA_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data file.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobIndex {
    pub schema_version: u32,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
}

/// A tensor read back from a blob.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Write `tensors` into `dir` (created if missing).
pub fn write_blob<'a>(dir: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::validation(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f32".into(),
            offset: bytes.len() as u64,
        });
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = BlobIndex { schema_version: BLOB_SCHEMA_VERSION, byte_order: "little".into(), tensors: entries };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    write_json(&dir.join(INDEX_FILE), &index)
}

/// Read every tensor stored in `dir`.
pub fn read_blob(dir: &Path) -> Result<Vec<NamedTensor>> {
    let index: BlobIndex = read_json(&dir.join(INDEX_FILE))?;
    if index.schema_version != BLOB_SCHEMA_VERSION {
        return Err(Error::validation(format!(
            "{}: unsupported blob schema_version {}",
            dir.display(),
            index.schema_version
        )));
    }
    if index.byte_order != "little" {
        return Err(Error::validation(format!("unsupported byte order {}", index.byte_order)));
    }
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    index
        .tensors
        .into_iter()
        .map(|t| {
            if t.dtype != "f32" {
                return Err(Error::validation(format!("tensor {}: unsupported dtype {}", t.name, t.dtype)));
            }
            let len = t.shape.iter().product::<usize>();
            let start = t.offset as usize;
            let end = start + 4 * len;
            if end > bytes.len() {
                return Err(Error::validation(format!(
                    "tensor {} extends past end of {}",
                    t.name,
                    data_path.display()
                )));
            }
            let data =
                bytes[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(NamedTensor { name: t.name, shape: t.shape, data })
        })
        .collect()
}
