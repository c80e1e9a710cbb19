use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainingStage {
    /// Trained from initialisation.
    Base,
    /// Continued from the model with the given content hash.
    FineTune { from_hash: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: TrainingStage,
    /// Period whose training split produced these weights.
    pub period: Option<i64>,
    pub train_config: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
}

impl CheckpointMeta {
    pub fn untrained() -> Self {
        Self {
            stage: TrainingStage::Base,
            period: None,
            train_config: None,
            final_loss: None,
            train_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn new(model: Model, meta: CheckpointMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_json(&self) -> Result<String> {
        let p = self.model.params();
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.model.config().clone(),
            meta: self.meta.clone(),
            tensors: self
                .model
                .layout()
                .tensors()
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: p[t.range()].to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Numerical(format!("checkpoint encode: {e}")))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                origin,
                format!(
                    "checkpoint format version {} is not supported (expected {})",
                    file.format_version, CHECKPOINT_FORMAT_VERSION
                ),
            ));
        }
        let mut model = Model::init(file.config).map_err(|e| Error::format(origin, e.to_string()))?;
        let layout = model.layout().clone();
        if file.tensors.len() != layout.tensors().len() {
            return Err(Error::format(
                origin,
                format!(
                    "expected {} tensors, found {}",
                    layout.tensors().len(),
                    file.tensors.len()
                ),
            ));
        }
        for t in &file.tensors {
            let spec = layout
                .find(&t.name)
                .ok_or_else(|| Error::format(origin, format!("unknown tensor `{}`", t.name)))?;
            if spec.shape != t.shape || t.data.len() != spec.len() {
                return Err(Error::format(
                    origin,
                    format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        t.name, t.shape, spec.shape
                    ),
                ));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(origin, format!("tensor `{}` is not finite", t.name)));
            }
            model.params_mut()[spec.range()].copy_from_slice(&t.data);
        }
        Ok(Self {
            model,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}
