use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MonitorConfig, MonitorModel, TrainReport};
use crate::diffcore::{GumbelMode, Tensor};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "prefixguard-monitor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub format_version: u32,
    pub config: MonitorConfig,
    pub input_dim: usize,
    pub vectorizer_hash: String,
    pub seed: u64,
    pub beta: f64,
    pub evaluation_mode: GumbelMode,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub train_report: Option<TrainReport>,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn artifact_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Artifact { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes `manifest.json` plus one little-endian f64 blob per parameter into `dir`.
pub fn save_model(dir: &Path, model: &MonitorModel, report: Option<&TrainReport>) -> Result<ModelManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in model.param_names().iter().zip(&model.params) {
        let bytes = tensor_bytes(t);
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        format_version: 1,
        config: model.config.clone(),
        input_dim: model.input_dim,
        vectorizer_hash: model.vectorizer_hash.clone(),
        seed: model.config.seed,
        beta: model.config.beta,
        evaluation_mode: GumbelMode::Deterministic,
        tensors,
        train_report: report.cloned(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a model directory, verifying every blob hash and shape.
pub fn load_model(dir: &Path) -> Result<(MonitorModel, ModelManifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| artifact_err(&path, e.to_string()))?;
    if manifest.format != MODEL_FORMAT {
        return Err(artifact_err(&path, format!("unexpected format {:?}", manifest.format)));
    }
    manifest.config.validate()?;
    let shapes = MonitorModel::expected_shapes(&manifest.config, manifest.input_dim);
    if shapes.len() != manifest.tensors.len() {
        return Err(artifact_err(&path, "tensor count does not match the configured backend"));
    }
    let mut params = Vec::new();
    for (entry, &(rows, cols)) in manifest.tensors.iter().zip(&shapes) {
        let blob_path = dir.join(&entry.file);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(artifact_err(&blob_path, "sha256 mismatch"));
        }
        if (entry.rows, entry.cols) != (rows, cols) || bytes.len() != rows * cols * 8 {
            return Err(artifact_err(&blob_path, format!("expected shape {rows}x{cols}")));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(Tensor::from_vec(rows, cols, data)?);
    }
    let model = MonitorModel {
        config: manifest.config.clone(),
        input_dim: manifest.input_dim,
        vectorizer_hash: manifest.vectorizer_hash.clone(),
        params,
    };
    if model.param_names().iter().zip(&manifest.tensors).any(|(n, e)| *n != e.name) {
        return Err(artifact_err(&path, "tensor names do not match the configured backend"));
    }
    Ok((model, manifest))
}
