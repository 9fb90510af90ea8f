//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries a format tag, a version, the model configuration and run
//! bookkeeping. Tensors are stored as `model/<name>` and, when present,
//! `ema/<name>`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, StudentModel};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "boxdistill-checkpoint";
/// Readers accept any version up to this one; newer files are rejected.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Run bookkeeping stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: usize,
    pub metric_name: String,
    /// Selection metric on validation data; `None` when undefined.
    pub metric: Option<f64>,
    pub config_hash: String,
    pub teacher_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub model: StudentModel,
    pub ema: Option<StudentModel>,
}

impl Checkpoint {
    /// The weights used for inference: EMA when stored and requested.
    pub fn inference_model(&self, use_ema: bool) -> &StudentModel {
        match (&self.ema, use_ema) {
            (Some(ema), true) => ema,
            _ => &self.model,
        }
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &StudentModel,
    ema: Option<&StudentModel>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .params()
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("model/{n}"), t))
        .collect();
    if let Some(ema) = ema {
        tensors.extend(
            ema.params()
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("ema/{n}"), t)),
        );
    }
    let mut header = HashMap::new();
    header.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    header.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    header.insert(
        "model_config".to_string(),
        serde_json::to_string(model.config())?,
    );
    header.insert("meta".to_string(), serde_json::to_string(meta)?);
    let contiguous: Vec<(String, Tensor)> = tensors
        .into_iter()
        .map(|(n, t)| Ok((n, t.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(
        contiguous.iter().map(|(n, t)| (n.as_str(), t)),
        Some(header),
    )
    .map_err(|e| Error::Checkpoint(format!("serializing {}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let header = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{} is not a checkpoint: {e}", path.display())))?
        .1
        .metadata()
        .clone()
        .unwrap_or_default();
    let field = |k: &str| {
        header.get(k).ok_or_else(|| {
            Error::Checkpoint(format!("{} lacks header field `{k}`", path.display()))
        })
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{} is not a student checkpoint",
            path.display()
        )));
    }
    let version: u32 = field("version")?
        .parse()
        .map_err(|_| Error::Checkpoint("unreadable checkpoint version".into()))?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is newer than supported version {CHECKPOINT_VERSION}"
        )));
    }
    let config: ModelConfig = serde_json::from_str(field("model_config")?)?;
    let meta: CheckpointMeta = serde_json::from_str(field("meta")?)?;
    let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut model_t = HashMap::new();
    let mut ema_t = HashMap::new();
    for (k, v) in all {
        if let Some(n) = k.strip_prefix("model/") {
            model_t.insert(n.to_string(), v);
        } else if let Some(n) = k.strip_prefix("ema/") {
            ema_t.insert(n.to_string(), v);
        }
    }
    let model = StudentModel::from_named_tensors(&config, &model_t)?;
    let ema = if ema_t.is_empty() {
        None
    } else {
        Some(StudentModel::from_named_tensors(&config, &ema_t)?)
    };
    Ok(Checkpoint {
        config,
        meta,
        model,
        ema,
    })
}
