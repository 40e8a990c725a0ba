//! Single-file checkpoints: safetensors weights plus a JSON header.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use vcaptcha_core::NormStats;

use crate::nets::{Arch, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "vcaptcha";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: Arch,
    pub norm: NormStats,
    pub threshold: Option<f32>,
    pub training: Option<TrainingInfo>,
    /// Names of parameters stored as frozen.
    #[serde(default)]
    pub frozen: Vec<String>,
}

/// A trained model with everything inference needs.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: NormStats,
    pub threshold: Option<f32>,
    pub training: Option<TrainingInfo>,
}

impl Checkpoint {
    pub fn new(model: Model, norm: NormStats) -> Self {
        Self {
            model,
            norm,
            threshold: None,
            training: None,
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            arch: self.model.arch().clone(),
            norm: self.norm,
            threshold: self.threshold,
            training: self.training.clone(),
            frozen: self
                .model
                .store
                .iter()
                .filter(|p| !p.trainable)
                .map(|p| p.name.clone())
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .model
            .store
            .iter()
            .map(|p| {
                let bytes = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (p.name.clone(), p.value.shape().to_vec(), bytes)
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| NnError::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::serialize(views, Some(info)).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| NnError::Checkpoint("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(text).map_err(|e| NnError::Checkpoint(format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut loaded = ParamStore::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(NnError::Checkpoint(format!("tensor {name} is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let id = loaded.add(name.clone(), Tensor::new(view.shape().to_vec(), data)?);
            loaded.get_mut(id).trainable = !meta.frozen.contains(&name);
        }
        let mut model = Model::build(meta.arch.clone(), 0)?;
        model.store.load_from(&loaded)?;
        Ok(Self {
            model,
            norm: meta.norm,
            threshold: meta.threshold,
            training: meta.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
