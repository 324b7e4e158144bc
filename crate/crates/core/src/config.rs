//! Run configuration: one JSON file drives every subcommand. Unknown keys
//! are rejected, and dotted-path overrides let the command line patch any
//! field without editing the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptor::{AdaptorConfig, AdaptorTrainConfig};
use crate::error::{Error, Result};
use crate::gan::GanTrainConfig;
use crate::metrics::MetricProtocol;
use crate::models::ArchConfig;
use crate::synth::{CameraPrior, SceneSpec};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset folder; when absent, stages look for `<out>/dataset`.
    pub path: Option<PathBuf>,
    /// Synthetic generation settings (the `synth-data` subcommand).
    pub n_per_class: usize,
    pub specs: Option<Vec<SceneSpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            n_per_class: 2000,
            specs: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub protocol: MetricProtocol,
    pub extractor_seed: u64,
    pub extractor_channels: usize,
    pub extractor_scales: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            protocol: MetricProtocol::default(),
            extractor_seed: 2024,
            extractor_channels: 64,
            extractor_scales: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateConfig {
    /// Video directory (frames + trajectory.json) to translate. When absent,
    /// a source orbit is rendered from the first scene spec.
    pub video: Option<PathBuf>,
    /// Single image file to translate instead of a video.
    pub image: Option<PathBuf>,
    pub target_class: usize,
    pub style_seed: u64,
    /// Orbit used when no input is given.
    pub orbit: OrbitConfig,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        Self {
            video: None,
            image: None,
            target_class: 2,
            style_seed: 7,
            orbit: OrbitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitConfig {
    pub n_frames: usize,
    pub yaw_from: f64,
    pub yaw_to: f64,
    pub pitch: f64,
    /// Index into the scene specs (0-based).
    pub spec_index: usize,
    pub seed: u64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            yaw_from: -0.6,
            yaw_to: 0.6,
            pitch: 0.1,
            spec_index: 0,
            seed: 33,
        }
    }
}

/// Everything a run needs. All randomness flows from `seed` through named
/// sub-streams, so stages are independently reproducible.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub camera: CameraPrior,
    pub pretrain: GanTrainConfig,
    pub finetune: GanTrainConfig,
    pub adaptor: AdaptorConfig,
    pub adaptor_train: AdaptorTrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
    pub translate: TranslateConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.camera.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.adaptor_train.weights.validate()?;
        if self.data.n_per_class == 0 {
            return Err(Error::config("data.n_per_class must be at least 1"));
        }
        if let Some(specs) = &self.data.specs {
            for s in specs {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn scene_specs(&self) -> Vec<SceneSpec> {
        self.data
            .specs
            .clone()
            .unwrap_or_else(crate::synth::default_scene_specs)
    }

    /// Load from JSON (optional), apply `key=value` overrides, validate.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: serde_json::Value = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", p.display()))
            })?)
            .map_err(|e| Error::config(format!("config {} is not valid JSON: {e}", p.display())))?,
            None => serde_json::json!({}),
        };
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Set a dotted-path key to a JSON-parsed (or raw-string) value.
pub fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::config(format!(
                "override {key}: {} is not an object",
                parts[..i].join(".")
            )));
        }
        let map = cursor.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}
