use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dlo_core::RepresentationConfig;
use serde::{Deserialize, Serialize};

use crate::{Architecture, ModelParams, NeuroError, Normalization, Tensor, TrainingMeta};

pub const MODEL_FORMAT: &str = "dlo-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    arch: String,
    representation: RepresentationConfig,
    n_points: usize,
    meta: TrainingMeta,
    norm: Normalization,
    tensors: BTreeMap<String, Tensor>,
}

pub fn model_to_json(params: &ModelParams) -> Result<String, NeuroError> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        arch: params.arch.tag().into(),
        representation: params.cfg,
        n_points: params.cfg.n_points,
        meta: params.meta.clone(),
        norm: params.norm.clone(),
        tensors: params.tensors.clone(),
    };
    serde_json::to_string(&file).map_err(|e| NeuroError::Format(e.to_string()))
}

/// Parses a model; `expect` rejects files of another architecture.
pub fn model_from_json(text: &str, expect: Option<Architecture>) -> Result<ModelParams, NeuroError> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| NeuroError::Format(e.to_string()))?;
    if file.format != MODEL_FORMAT {
        return Err(NeuroError::Format(format!("not a model file (format `{}`)", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(NeuroError::Format(format!(
            "model version {} is not supported (expected {MODEL_VERSION})",
            file.version
        )));
    }
    let arch: Architecture = file.arch.parse()?;
    if let Some(want) = expect {
        if want != arch {
            return Err(NeuroError::Format(format!("file holds a {arch} model, expected {want}")));
        }
    }
    if file.n_points != file.representation.n_points {
        return Err(NeuroError::Format("point count disagrees with the representation".into()));
    }
    for (name, t) in &file.tensors {
        Tensor::new(t.shape.clone(), t.data.clone()).map_err(|e| NeuroError::Shape(format!("{name}: {e}")))?;
    }
    let params = ModelParams {
        arch,
        cfg: file.representation,
        tensors: file.tensors,
        norm: file.norm,
        meta: file.meta,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<(), NeuroError> {
    fs::write(path, model_to_json(params)?)?;
    Ok(())
}

pub fn load_model(path: &Path, expect: Option<Architecture>) -> Result<ModelParams, NeuroError> {
    model_from_json(&fs::read_to_string(path)?, expect)
}
