//! `TSR1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "TSR1"
//! 4..8    u32 format version (1)
//! 8..16   u64 manifest length
//! 16..24  u64 payload length
//! ...     manifest: compact JSON {"tensors":[{name,rows,cols,offset}],"metadata":{..}}
//! ...     payload: row-major f64 blocks, offsets relative to payload start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"TSR1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Named matrices plus string metadata. Iteration order is by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: BTreeMap<String, Matrix>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: u64,
    cols: u64,
    offset: u64,
}

pub fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Input("tensor name must not be empty".into()));
    }
    if !name.is_ascii() || name.contains(['/', '\n', '\0']) {
        return Err(Error::Input(format!("invalid tensor name {name:?}")));
    }
    Ok(())
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; names must be valid and not already present.
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.entries.contains_key(&name) {
            return Err(Error::Input(format!("duplicate tensor name `{name}`")));
        }
        self.entries.insert(name, m);
        Ok(())
    }

    /// Inserts or overwrites a tensor.
    pub fn put(&mut self, name: impl Into<String>, m: Matrix) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        self.entries.insert(name, m);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Serializes to the `TSR1` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, m) in &self.entries {
            tensors.push(ManifestEntry { name: name.clone(), rows: m.rows() as u64, cols: m.cols() as u64, offset });
            offset += 8 * m.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest { tensors, metadata: self.metadata.clone() })?;

        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&manifest);
        for m in self.entries.values() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .and_then(|v| v.checked_add(payload_len))
            .ok_or_else(|| Error::Format("header lengths overflow".into()))?;
        if (bytes.len() as u64) < expected {
            return Err(Error::Format(format!("truncated: header declares {expected} bytes, file has {}", bytes.len())));
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() as u64 - expected)));
        }
        let manifest_end = HEADER_LEN + manifest_len as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let payload = &bytes[manifest_end..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
        let mut store = TensorStore::new();
        for t in &manifest.tensors {
            validate_name(&t.name).map_err(|e| Error::Format(e.to_string()))?;
            if t.rows == 0 || t.cols == 0 {
                return Err(Error::Format(format!("tensor `{}` has an empty dimension", t.name)));
            }
            if t.offset % 8 != 0 {
                return Err(Error::Format(format!("tensor `{}` offset {} is not 8-byte aligned", t.name, t.offset)));
            }
            let size = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor `{}` size overflows", t.name)))?;
            let end = t
                .offset
                .checked_add(size)
                .filter(|&e| e <= payload_len)
                .ok_or_else(|| Error::Format(format!("tensor `{}` extends past the payload", t.name)))?;
            let data = payload[t.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::new(t.rows as usize, t.cols as usize, data).map_err(|e| Error::Format(format!("tensor `{}`: {e}", t.name)))?;
            if store.entries.insert(t.name.clone(), m).is_some() {
                return Err(Error::Format(format!("duplicate tensor name `{}`", t.name)));
            }
            spans.push((t.offset, end, &t.name));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        store.metadata = manifest.metadata;
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn store_write(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    store.write(path)
}

pub fn store_read(path: impl AsRef<Path>) -> Result<TensorStore> {
    TensorStore::read(path)
}
