//! Single-file checkpoints: parameters as safetensors, with the run config
//! and registry stored in the header metadata.
//!
//! The header holds a single metadata entry so the file bytes do not depend
//! on hash-map iteration order.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::registry::CategoryRegistry;

pub const FORMAT: &str = "cellprompt-checkpoint/1";
const META_KEY: &str = "cellprompt";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: RunConfig,
    registry: CategoryRegistry,
    iteration: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model, config: &RunConfig, iteration: usize) -> Result<()> {
    let vars = model.params().vars();
    let tensors: Vec<(String, candle_core::Tensor)> = vars
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    let header = Header {
        format: FORMAT.to_string(),
        config: config.clone(),
        registry: model.registry().clone(),
        iteration,
    };
    let metadata: HashMap<String, String> =
        [(META_KEY.to_string(), serde_json::to_string(&header).expect("header serializes"))].into();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(metadata))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub config: RunConfig,
    pub iteration: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("missing metadata".into()))?;
    let raw = meta
        .get(META_KEY)
        .ok_or_else(|| bad(format!("missing metadata entry {META_KEY}")))?;
    let header: Header = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(format!("unsupported format {}", header.format)));
    }
    let Header {
        config,
        registry,
        iteration,
        ..
    } = header;
    let model = Model::new(&config.model, &config.dpm, &registry, config.seed, DType::F32)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let vars = model.params().vars();
    if vars.len() != tensors.len() {
        return Err(bad(format!("{} tensors stored, model has {}", tensors.len(), vars.len())));
    }
    for (name, var) in vars {
        let t = tensors
            .get(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(LoadedCheckpoint {
        model,
        config,
        iteration,
    })
}
