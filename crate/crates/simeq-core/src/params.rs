//! Named parameter storage and the on-disk tensor blob format.
//!
//! Parameters serialize to a flat binary blob of little-endian 64-bit floats
//! in row-major order, with a JSON sidecar manifest listing `(name, shape,
//! offset)` per tensor; offsets are in bytes from the start of the blob.

use crate::tensor::Tensor;
use crate::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("blob i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob length {got} does not match manifest ({want} bytes)")]
    BlobLength { got: usize, want: usize },
    #[error("parameter {0:?} missing from manifest")]
    Missing(String),
    #[error("parameter {name:?}: shape {got:?} does not match expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry<F> {
    name: String,
    value: Tensor<F>,
    trainable: bool,
    /// Whether decoupled weight decay applies (weight matrices yes;
    /// layer-norm gains/offsets and bias directions no).
    decay: bool,
}

pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<F>, decay: bool) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable: true,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        self.entries[id.0].value.shape()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn wants_decay(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn any_non_finite(&self) -> bool {
        self.entries.iter().any(|e| !e.value.all_finite())
    }

    /// Serialize all parameters (values are widened to f64 on disk).
    pub fn to_blob(&self) -> (Vec<u8>, BlobManifest) {
        let mut blob = Vec::with_capacity(self.total_elements() * 8);
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let offset = blob.len();
            for &v in e.value.data() {
                let x = v.to_f64().expect("finite parameter");
                blob.extend_from_slice(&x.to_le_bytes());
            }
            tensors.push(BlobTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
            });
        }
        (blob, BlobManifest { tensors })
    }

    /// Load values for already-registered parameters by name. Every
    /// registered parameter must be present with a matching shape.
    pub fn load_blob(&mut self, blob: &[u8], manifest: &BlobManifest) -> Result<(), ParamError> {
        let want: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
        let max_end = manifest
            .tensors
            .iter()
            .map(|t| t.offset + t.shape.iter().product::<usize>() * 8)
            .max()
            .unwrap_or(0);
        if blob.len() < max_end {
            return Err(ParamError::BlobLength { got: blob.len(), want });
        }
        for e in &mut self.entries {
            let rec = manifest
                .tensors
                .iter()
                .find(|t| t.name == e.name)
                .ok_or_else(|| ParamError::Missing(e.name.clone()))?;
            if rec.shape != e.value.shape() {
                return Err(ParamError::ShapeMismatch {
                    name: e.name.clone(),
                    got: rec.shape.clone(),
                    want: e.value.shape().to_vec(),
                });
            }
            let n = e.value.numel();
            let bytes = &blob[rec.offset..rec.offset + n * 8];
            for (i, slot) in e.value.data_mut().iter_mut().enumerate() {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bytes[i * 8..i * 8 + 8]);
                *slot = F::from_f64_lossy(f64::from_le_bytes(buf));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobManifest {
    pub tensors: Vec<BlobTensor>,
}
