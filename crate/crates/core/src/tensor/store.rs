use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DType, Scalar, Tensor};
use crate::{Error, Result};

/// One tensor in a parameter blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// JSON side of the parameter format: entries in canonical (sorted) order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub tensors: Vec<ManifestEntry>,
}

/// Named parameters keyed by canonical path, e.g. `layers.3.attn.o_proj`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, va), (kb, vb))| ka == kb && va == vb)
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), Arc::new(t));
    }

    pub fn insert_shared(&mut self, name: impl Into<String>, t: Arc<Tensor<T>>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name).map(Arc::as_ref)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    /// Shared handle for binding into a graph without copying.
    pub fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        self.map.get(name).cloned().ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    /// Mutable access; clones only if a graph still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn checksum(&self, name: &str) -> Option<u64> {
        self.get(name).map(Tensor::checksum)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }

    /// Little-endian blob plus its manifest.
    pub fn to_bytes(&self) -> (TensorManifest, Vec<u8>) {
        let mut blob = Vec::with_capacity(self.numel() * T::DTYPE.size_of());
        let mut tensors = Vec::with_capacity(self.map.len());
        for (name, t) in &self.map {
            tensors.push(ManifestEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for &x in t.data() {
                x.put_le(&mut blob);
            }
        }
        (TensorManifest { tensors }, blob)
    }

    pub fn from_bytes(manifest: &TensorManifest, blob: &[u8]) -> Result<Self> {
        let mut out = Self::new();
        for e in &manifest.tensors {
            if e.dtype != T::DTYPE {
                return Err(Error::Format(format!("{}: stored as {:?}, requested {:?}", e.name, e.dtype, T::DTYPE)));
            }
            let size = T::DTYPE.size_of();
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * size;
            let bytes = blob
                .get(e.offset..end)
                .ok_or_else(|| Error::Format(format!("{}: bytes {}..{end} beyond blob of {}", e.name, e.offset, blob.len())))?;
            let data = bytes.chunks_exact(size).map(T::get_le).collect();
            out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(out)
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (blob) into `dir`.
    pub fn save(&self, dir: &Path, manifest_name: &str, blob_name: &str) -> Result<()> {
        let (manifest, blob) = self.to_bytes();
        fs::write(dir.join(manifest_name), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join(blob_name), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path, manifest_name: &str, blob_name: &str) -> Result<Self> {
        let manifest: TensorManifest = serde_json::from_slice(&fs::read(dir.join(manifest_name))?)?;
        let blob = fs::read(dir.join(blob_name))?;
        Self::from_bytes(&manifest, &blob)
    }
}
