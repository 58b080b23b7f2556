//! Model checkpoints: parameter tensors plus a JSON description of the model,
//! so a checkpoint alone is enough to rebuild and render.

use std::path::Path;

use lidarfield_autodiff::checkpoint::{load_file, save_file, NamedTensor};
use lidarfield_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_fields::SceneBounds;
use crate::lidar_model::SensorIntrinsics;
use crate::neural_field::{LidarField, ModelConfig};

/// Name of the tensor holding the UTF-8 JSON metadata, one byte per entry.
pub const META_TENSOR: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub intrinsics: SensorIntrinsics,
    pub bounds: SceneBounds,
    pub iterations_done: usize,
}

pub fn save_checkpoint(path: &Path, model: &LidarField, store: &ParamStore<f32>, iterations_done: usize) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config().clone(),
        intrinsics: *model.intrinsics(),
        bounds: *model.bounds(),
        iterations_done,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut tensors = vec![NamedTensor::new(META_TENSOR, vec![json.len()], json.iter().map(|&b| b as f32).collect())];
    tensors.extend(store.to_named_tensors());
    save_file(path, &tensors)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(LidarField, ParamStore<f32>, CheckpointMeta)> {
    let tensors = load_file(path)?;
    let meta_t = tensors
        .iter()
        .find(|t| t.name == META_TENSOR)
        .ok_or_else(|| Error::Format(format!("{}: no `{META_TENSOR}` entry; not a model checkpoint", path.display())))?;
    let bytes: Vec<u8> = meta_t.data.iter().map(|&v| v as u8).collect();
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
    let (model, mut store) = LidarField::new(&meta.model, meta.intrinsics, meta.bounds)?;
    let params: Vec<NamedTensor> = tensors.into_iter().filter(|t| t.name != META_TENSOR).collect();
    store.load_named_tensors(&params)?;
    Ok((model, store, meta))
}
