//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a single file: one line of UTF-8 JSON (the manifest)
//! terminated by `\n`, followed by the little-endian `f32` blob holding every
//! entry back to back in manifest order. Offsets in the manifest are relative
//! to the first blob byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "vsr-checkpoint-v1";

/// Ordered map from dot-separated parameter names to arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, ArrayD<T>>,
    /// Fingerprint of the model configuration these parameters belong to.
    pub fingerprint: String,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
            fingerprint: fingerprint.into(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) -> Result<()> {
        let name = name.into();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {name} has non-finite entries")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, crate::kernels::standard(value));
        Ok(())
    }

    /// Replaces an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = crate::kernels::standard(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<T>> {
        self.get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<T>> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total element count over entries whose name satisfies `filter`.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| filter(n)).map(|(_, v)| v.len()).sum()
    }

    /// Copy keeping only entries whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// SHA-256 over names, shapes and the `f32` little-endian contents.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.iter() {
                h.update(x.as_f32().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Serializes to the checkpoint format (values narrowed to `f32`).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let mut entries = Vec::with_capacity(self.len());
        for (name, v) in self.iter() {
            let byte_length = v.len() * 4;
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
                dtype: "f32".to_string(),
                byte_offset: offset,
                byte_length,
            });
            offset += byte_length;
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            fingerprint: self.fingerprint.clone(),
            entries,
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.reserve(offset);
        for (_, v) in self.iter() {
            for &x in v.iter() {
                out.extend_from_slice(&x.as_f32().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("checkpoint manifest is not newline-terminated".into()));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        let mut store = ParameterStore::new(manifest.fingerprint);
        for e in manifest.entries {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.byte_length != numel * 4 || e.byte_offset + e.byte_length > blob.len() {
                return Err(Error::Format(format!("{}: byte range inconsistent with shape", e.name)));
            }
            let bytes = &blob[e.byte_offset..e.byte_offset + e.byte_length];
            let values: Vec<T> = bytes
                .chunks_exact(4)
                .map(|c| T::from_f32_bits(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|err| Error::Format(format!("{}: {err}", e.name)))?;
            store
                .insert(e.name, arr)
                .map_err(|err| Error::Format(err.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::from_reader(f)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub fingerprint: String,
    pub entries: Vec<ManifestEntry>,
}
