//! The run configuration file and `key=value` overrides.
//!
//! One TOML document drives every command. Training fields sit at the top
//! level (`lr`, `epochs`, `[loss]`, `[model]`, ...); the remaining tables
//! are `[data]`, `[teacher]`, `[pseudo_label]` and `[synth]`. Overrides use
//! dotted paths (`loss.tau=0.95`) and are applied before deserialization, so
//! an override naming an undeclared key is rejected like a typo in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::annotations::Split;
use crate::error::{Error, Result};
use crate::pseudo_labels::PseudoLabelOptions;
use crate::synthetic::{NoiseProfile, SceneConfig, SplitSizes};
use crate::teacher::TeacherKind;
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Root of the pseudo-label cache.
    pub cache_root: PathBuf,
    /// Manual ground-truth masks for evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_dir: Option<PathBuf>,
    /// Split used by `predict` and `eval`.
    pub eval_split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Predicted class maps read by `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// Ground-truth value excluded from evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u8>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            cache_root: PathBuf::from("cache"),
            gt_dir: None,
            eval_split: Split::Test,
            checkpoint: None,
            predictions: None,
            ignore_label: None,
        }
    }
}

/// Settings of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SynthConfig {
    pub scene: SceneConfig,
    pub noise: NoiseProfile,
    pub sizes: SplitSizes,
    /// Also run the pair on a noiseless teacher.
    pub clean_control: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub teacher: TeacherKind,
    pub pseudo_label: PseudoLabelOptions,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.synth.scene.validate()?;
        self.synth.noise.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))
    }

    /// Parses a document and applies `overrides` in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid configuration: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let keys: Vec<String> = table.keys().cloned().collect();
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        // flattened fields bypass deny_unknown_fields, so top-level keys are checked here
        let known = Value::try_from(&cfg)
            .map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))?;
        if let Some(k) = keys.iter().find(|k| known.get(k.as_str()).is_none()) {
            return Err(Error::config(format!("unknown configuration key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        RunConfig::from_toml_str(&text, overrides)
    }
}

/// Sets `a.b.c = value` in `table`; the value is read as TOML and falls
/// back to a plain string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::from_toml_str(
            "epochs = 3\n[loss]\ntau = 0.8\n",
            &[
                "loss.tau=0.95".into(),
                "data.manifest=data/m.json".into(),
                "hflip=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.loss.tau, 0.95);
        assert!(!cfg.training.hflip);
        assert_eq!(cfg.data.manifest, Some(PathBuf::from("data/m.json")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("", &["loss.tua=0.9".into()]).is_err());
        assert!(RunConfig::from_toml_str("learning_rate = 0.1", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["no_equals".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["loss.tau=2.0".into()]).is_err());
    }
}
