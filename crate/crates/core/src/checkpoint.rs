//! Checkpoint file: magic "DVCK", u32 version, length-prefixed JSON metadata
//! (architecture description plus a named-tensor manifest), then f64
//! little-endian payloads in manifest order. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{DvtError, Result};
use crate::format::Reader;
use crate::graph::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_META_BYTES: u64 = 1 << 30;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    architecture: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint: the architecture blob it was saved with and the
/// named parameter tensors in their original registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn architecture_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.architecture.clone()).map_err(|e| {
            DvtError::Config(format!("checkpoint architecture does not deserialize: {e}"))
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copies every tensor into a store built for the same architecture.
    /// The name sets must match exactly; shapes are checked per tensor.
    pub fn apply_to_store(&self, store: &mut ParamStore) -> Result<()> {
        let store_names: Vec<String> = store
            .ids()
            .map(|id| store.name(id).to_string())
            .collect();
        if store_names.len() != self.tensors.len() {
            return Err(DvtError::Config(format!(
                "checkpoint holds {} tensors but the model has {} parameters",
                self.tensors.len(),
                store_names.len()
            )));
        }
        for (name, tensor) in &self.tensors {
            let id = store.find(name).ok_or_else(|| {
                DvtError::Config(format!("checkpoint tensor {name} has no model parameter"))
            })?;
            if store.value(id).shape() != tensor.shape() {
                return Err(DvtError::Config(format!(
                    "checkpoint tensor {name} has shape {:?} but the model expects {:?}",
                    tensor.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, tensor.clone())?;
        }
        Ok(())
    }
}

/// Saves the store's parameters with an architecture description chosen by
/// the caller. Tensor order is the store's registration order, so saves of
/// identically built models are byte-identical.
pub fn save_checkpoint<A: Serialize>(path: &Path, architecture: &A, store: &ParamStore) -> Result<()> {
    let arch = serde_json::to_value(architecture)?;
    let tensors: Vec<TensorMeta> = store
        .ids()
        .map(|id| TensorMeta {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
        })
        .collect();
    let meta_bytes = serde_json::to_vec(&CheckpointMeta {
        architecture: arch,
        tensors,
    })?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    for id in store.ids() {
        for &v in store.value(id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(&CHECKPOINT_MAGIC, "\"DVCK\"")?;
    let version = r.u32_le()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!(
            "unsupported version {version} at byte 4 (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u64_le()?;
    if meta_len > MAX_META_BYTES {
        return Err(r.error(format!("implausible metadata length {meta_len} at byte 8")));
    }
    let meta_start = r.offset();
    let meta_bytes = r.bytes(meta_len as usize)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| r.error(format!("metadata at byte {meta_start} is not valid JSON: {e}")))?;

    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for tm in &meta.tensors {
        let numel: usize = tm.shape.iter().product();
        let data = r.f64_values(numel)?;
        tensors.push((tm.name.clone(), Tensor::new(tm.shape.clone(), data)?));
    }
    r.expect_eof()?;
    Ok(Checkpoint {
        architecture: meta.architecture,
        tensors,
    })
}
