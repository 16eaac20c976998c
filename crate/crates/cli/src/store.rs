//! Directory-based tensor store: `manifest.json` describing every entry and
//! `data.bin` holding the little-endian, row-major values back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lowrank_core::Matrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "data.bin";
const FORMAT: &str = "lowrank-store/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: [usize; 2],
    pub byte_offset: usize,
    pub byte_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub attributes: BTreeMap<String, Value>,
    pub entries: Vec<Entry>,
}

/// In-memory view of a store. Tensors are kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorStore {
    pub kind: String,
    pub attributes: BTreeMap<String, Value>,
    tensors: Vec<(String, Dtype, Matrix)>,
}

impl TensorStore {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            attributes: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a tensor. At `F32` the values are rounded on write, so callers
    /// that need the in-memory copy to match the file should round first.
    pub fn insert(&mut self, name: impl Into<String>, dtype: Dtype, m: &Matrix) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _, _)| *n == name) {
            return Err(CliError::Io(format!("duplicate tensor {name}")));
        }
        self.tensors.push((name, dtype, m.clone()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, m)| m)
            .ok_or_else(|| CliError::Io(format!("store `{}` has no tensor {name}", self.kind)))
    }

    pub fn dtype(&self, name: &str) -> Option<Dtype> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, d, _)| *d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn set_attr(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| CliError::Io(e.to_string()))?;
        self.attributes.insert(key.to_string(), v);
        Ok(())
    }

    pub fn attr<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .attributes
            .get(key)
            .ok_or_else(|| CliError::Io(format!("store `{}` has no attribute {key}", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| CliError::Io(format!("attribute {key}: {e}")))
    }

    /// Manifest and blob bytes.
    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, dtype, m) in &self.tensors {
            let start = blob.len();
            for &v in m.as_slice() {
                match dtype {
                    Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                }
            }
            entries.push(Entry {
                name: name.clone(),
                dtype: *dtype,
                shape: [m.rows(), m.cols()],
                byte_offset: start,
                byte_length: blob.len() - start,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            kind: self.kind.clone(),
            attributes: self.attributes.clone(),
            entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        Ok((text, blob))
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_str(manifest).map_err(|e| CliError::Io(format!("manifest: {e}")))?;
        if m.format != FORMAT {
            return Err(CliError::Io(format!("unsupported store format {}", m.format)));
        }
        let mut end = 0;
        let mut tensors = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            let count = e.shape[0] * e.shape[1];
            if e.byte_offset < end {
                return Err(CliError::Io(format!("entry {} overlaps or is out of order", e.name)));
            }
            if e.byte_length != count * e.dtype.size() {
                return Err(CliError::Io(format!("entry {} length does not match its shape", e.name)));
            }
            end = e.byte_offset + e.byte_length;
            if end > blob.len() {
                return Err(CliError::Io(format!("entry {} runs past the blob", e.name)));
            }
            let bytes = &blob[e.byte_offset..end];
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let mat = Matrix::from_vec(e.shape[0], e.shape[1], data).map_err(|err| CliError::Io(err.to_string()))?;
            tensors.push((e.name.clone(), e.dtype, mat));
        }
        Ok(Self {
            kind: m.kind,
            attributes: m.attributes,
            tensors,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
        let (manifest, blob) = self.encode()?;
        fs::write(dir.join(MANIFEST), manifest).map_err(|e| io_at(dir, e))?;
        fs::write(dir.join(BLOB), blob).map_err(|e| io_at(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| io_at(dir, e))?;
        let blob = fs::read(dir.join(BLOB)).map_err(|e| io_at(dir, e))?;
        Self::decode(&manifest, &blob)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind == kind {
            Ok(self)
        } else {
            Err(CliError::Io(format!("expected a {kind} store, found {}", self.kind)))
        }
    }
}

pub(crate) fn io_at(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
