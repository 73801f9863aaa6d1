//! Checkpoint layout: a directory holding `manifest.json` and `params.bin`.
//!
//! `params.bin` is every parameter tensor, row-major, little-endian, packed
//! back to back in manifest order. Each manifest entry gives the tensor's
//! name, shape and its offset/length in elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TemProxRec};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const FORMAT: &str = "temprox-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of `params.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub config: ModelConfig,
    pub vocab_rows: usize,
    pub num_days: usize,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (training config, dataset ids, metrics).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(model: &TemProxRec<T>, dir: &Path, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(model.num_parameters() * T::BYTES);
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.names.iter().zip(&model.params) {
        for &v in t.values() {
            v.write_le(&mut bytes);
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        dtype: T::DTYPE.into(),
        config: model.config.clone(),
        vocab_rows: model.vocab_rows,
        num_days: model.num_days,
        tensors,
        extra,
    };
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(TemProxRec<T>, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let start = e.offset * T::BYTES;
        let end = start + e.len * T::BYTES;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of {PARAMS_FILE}", e.name)));
        }
        let values = bytes[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
    }
    let model = TemProxRec::from_parts(manifest.config.clone(), manifest.vocab_rows, manifest.num_days, tensors)?;
    Ok((model, manifest))
}
