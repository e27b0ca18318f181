//! Flat little-endian container of named `f64` arrays.
//!
//! Layout:
//!
//! ```text
//! b"FSGANCK1"                8-byte magic
//! u64 LE                     manifest length in bytes
//! manifest                   UTF-8 JSON, see `Manifest`
//! f64 LE * total             array data, concatenated
//! ```
//!
//! Array offsets in the manifest are byte offsets from the start of the data
//! region.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSGANCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Named arrays in insertion order plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.arrays.iter().any(|(n, _)| *n == name) {
            return Err(TensorError::Checkpoint(format!("duplicate array `{name}`")));
        }
        self.arrays.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, t) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            arrays: entries,
            metadata: self.metadata.clone(),
        })
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for (_, t) in &self.arrays {
            let mut buf = Vec::with_capacity(8 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut manifest)?;
        let manifest: Manifest = serde_json::from_slice(&manifest)
            .map_err(|e| TensorError::Checkpoint(format!("manifest: {e}")))?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(TensorError::Checkpoint(format!(
                    "array `{}` runs past end of data",
                    entry.name
                )));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            arrays.push((entry.name, Tensor::new(entry.shape, values)?));
        }
        Ok(Checkpoint {
            arrays,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
