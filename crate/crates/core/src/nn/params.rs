//! Named parameter storage and its on-disk format.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`.
//! The blob is every tensor's data back to back as little-endian IEEE-754
//! `f64`; the manifest records name, shape, dtype and byte offset for each.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint has no tensor named {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: checkpoint shape {found:?} but model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Flat, ordered collection of model tensors. Trainable parameters and
/// non-trainable buffers (batch-norm running statistics) live side by side.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let entry = &mut self.entries[id.0];
        assert_eq!(
            entry.value.shape(),
            value.shape(),
            "shape change for parameter {}",
            entry.name
        );
        entry.value = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Records every tensor on `tape`; trainable ones as gradient leaves
    /// when `with_grad` is set, everything else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, with_grad: bool) -> Vec<Var<'t>> {
        self.entries
            .iter()
            .map(|e| tape.var(e.value.clone(), with_grad && e.trainable))
            .collect()
    }

    /// Zeroes every trainable tensor whose name starts with `prefix`.
    pub fn zero_params(&mut self, prefix: &str) {
        for e in self.entries.iter_mut() {
            if e.trainable && e.name.starts_with(prefix) {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), ParamError> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            tensors.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                dtype: "f64".into(),
                offset: blob.len() as u64,
                trainable: e.trainable,
            });
            for v in e.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            byte_order: "little".into(),
            tensors,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join(BLOB_FILE), blob)?;
        Ok(())
    }

    /// Overwrites every tensor of this store with the same-named tensor of
    /// the checkpoint in `dir`.
    pub fn load_values(&mut self, dir: &Path) -> Result<(), ParamError> {
        let loaded = Self::load(dir)?;
        for e in self.entries.iter_mut() {
            let id = loaded
                .find(&e.name)
                .ok_or_else(|| ParamError::Missing(e.name.clone()))?;
            let v = loaded.get(id);
            if v.shape() != e.value.shape() {
                return Err(ParamError::Shape {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: v.shape().to_vec(),
                });
            }
            e.value = v.clone();
        }
        Ok(())
    }

    /// Reads a checkpoint directory into a fresh store.
    pub fn load(dir: &Path) -> Result<Self, ParamError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.byte_order != "little" {
            return Err(ParamError::Format(format!(
                "unsupported format {:?}/{:?}",
                manifest.format, manifest.byte_order
            )));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let mut store = ParamStore::new();
        for t in manifest.tensors {
            if t.dtype != "f64" {
                return Err(ParamError::Format(format!("unsupported dtype {}", t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let end = start + 8 * n;
            let bytes = blob.get(start..end).ok_or_else(|| {
                ParamError::Format(format!("tensor {:?} runs past the end of the blob", t.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(&t.shape, data).map_err(|e| ParamError::Format(e.to_string()))?;
            store.push(t.name, value, t.trainable);
        }
        Ok(store)
    }
}

const MANIFEST_FORMAT: &str = "branchkit-params";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    byte_order: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    trainable: bool,
}

/// Uniform `[-bound, bound]` initialisation.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_trainable() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::zeros(&[4, 8]));
        s.add("a.b", Tensor::zeros(&[8]));
        s.add_buffer("bn.mean", Tensor::zeros(&[8]));
        assert_eq!(s.num_params(), 40);
        assert_eq!(s.num_params_under("a."), 40);
        assert_eq!(s.num_params_under("bn"), 0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::new(&[2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap());
        s.add_buffer("r", Tensor::vector(&[0.25]));
        s.save(dir.path()).unwrap();

        let loaded = ParamStore::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        let id = loaded.find("w").unwrap();
        assert_eq!(loaded.get(id), s.get(w));
        assert!(!loaded.is_trainable(loaded.find("r").unwrap()));

        let blob = std::fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(blob.len(), 5 * 8);
        assert_eq!(&blob[..8], &1.5f64.to_le_bytes());
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["tensors"][1]["offset"], 32);
        assert_eq!(manifest["tensors"][0]["dtype"], "f64");
    }

    #[test]
    fn load_values_checks_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[3]));
        s.save(dir.path()).unwrap();

        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[4]));
        assert!(matches!(other.load_values(dir.path()), Err(ParamError::Shape { .. })));

        let mut missing = ParamStore::new();
        missing.add("v", Tensor::zeros(&[3]));
        assert!(matches!(missing.load_values(dir.path()), Err(ParamError::Missing(_))));
    }
}
