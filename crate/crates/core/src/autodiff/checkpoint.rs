//! Binary model checkpoints.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! every tensor as little-endian `f32` in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_kind: String,
    hyperparameters: serde_json::Value,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_kind: String,
    pub hyperparameters: serde_json::Value,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params(model_kind: &str, hyperparameters: serde_json::Value, params: &ParamSet<f32>) -> Self {
        let tensors = params.ids().map(|id| (params.name(id).to_string(), params.value(id).clone())).collect();
        Self { model_kind: model_kind.to_string(), hyperparameters, metadata: BTreeMap::new(), tensors }
    }

    /// Copies stored tensors into `params`, which must have the same names and shapes.
    pub fn load_into(&self, params: &mut ParamSet<f32>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Compatibility(format!("unexpected tensor {name}")))?;
            if params.value(id).shape() != t.shape() {
                return Err(Error::Compatibility(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    params.value(id).shape()
                )));
            }
            *params.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel();
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_kind: self.model_kind.clone(),
            hyperparameters: self.hyperparameters.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let head: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header"))?.try_into().unwrap();
        let mlen = u64::from_le_bytes(head) as usize;
        let json = bytes.get(8..8 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let payload = &bytes[8 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload.get(e.offset..e.offset + 4 * n).ok_or_else(|| bad("truncated payload"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self {
            model_kind: manifest.model_kind,
            hyperparameters: manifest.hyperparameters,
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(content_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Ok((Self::from_bytes(&bytes)?, content_hash(&bytes)))
    }

    pub fn hash(&self) -> String {
        content_hash(&self.to_bytes())
    }
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
