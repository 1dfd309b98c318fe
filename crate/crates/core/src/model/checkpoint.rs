//! Checkpoint files: a JSON manifest (config, tensor table, optimizer step,
//! training history) next to a little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::serialize::{blob_path_for, decode, encode, file_name, DType, TensorEntry};
use crate::numerics::Tensor;
use crate::train::{HistoryRow, OptState};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    blob: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    velocity: Vec<TensorEntry>,
    #[serde(default)]
    step: usize,
    #[serde(default)]
    history: Vec<HistoryRow>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptState<f32>>,
    pub history: Vec<HistoryRow>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Self {
            params,
            optimizer: None,
            history: Vec::new(),
        }
    }

    /// Writes `path` (manifest) and the sibling `.bin` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (tensors, mut blob) = encode(self.params.tensors(), DType::F32);
        let mut velocity = Vec::new();
        let mut step = 0;
        if let Some(opt) = &self.optimizer {
            let named: Vec<(String, Tensor<f32>)> = self
                .params
                .tensors()
                .iter()
                .zip(&opt.velocity)
                .map(|((n, _), v)| (n.clone(), v.clone()))
                .collect();
            let (mut entries, extra) = encode(&named, DType::F32);
            for e in &mut entries {
                e.offset += blob.len();
            }
            blob.extend_from_slice(&extra);
            velocity = entries;
            step = opt.step;
        }
        let blob_path = blob_path_for(path);
        let manifest = Manifest {
            config: self.params.config().clone(),
            blob: file_name(&blob_path),
            tensors,
            velocity,
            step,
            history: self.history.clone(),
        };
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let params = ModelParams::from_tensors(manifest.config, decode(&manifest.tensors, &blob)?)?;
        let optimizer = if manifest.velocity.is_empty() {
            None
        } else {
            let velocity: Vec<Tensor<f32>> = decode(&manifest.velocity, &blob)?.into_iter().map(|(_, t)| t).collect();
            if velocity.len() != params.tensors().len()
                || velocity.iter().zip(params.tensors()).any(|(v, (_, p))| v.shape() != p.shape())
            {
                return Err(Error::shape("checkpoint", "optimizer state does not mirror parameters"));
            }
            Some(OptState {
                velocity,
                step: manifest.step,
            })
        };
        Ok(Self {
            params,
            optimizer,
            history: manifest.history,
        })
    }
}
