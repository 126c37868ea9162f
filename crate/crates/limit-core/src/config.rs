//! Run configuration: JSON files, dotted-path overrides, and validation
//! with field-path error messages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SplitSpec;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("override `{0}` must look like key.path=value")]
    BadOverride(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Synthetic mixture shape; ignored for csv.
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    /// Feature CSV path; required for csv.
    pub csv_path: Option<PathBuf>,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden layer widths between input and embedding dims.
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    /// Attention projection width.
    pub calib_hidden: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub norm_before_dropout: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Load with `key.path=value` overrides applied to the raw JSON tree
    /// before deserialization, so types stay checked.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        match d.source {
            DataSource::Synth => {
                if d.num_classes == 0 || d.dim == 0 || d.per_class == 0 {
                    return Err(invalid("dataset.num_classes", "synth shape must be >= 1"));
                }
                if d.spread < 0.0 {
                    return Err(invalid("dataset.spread", "must be >= 0"));
                }
            }
            DataSource::Csv => {
                if d.csv_path.is_none() {
                    return Err(invalid("dataset.csv_path", "required for csv source"));
                }
            }
        }
        if d.split.base_class_count == 0 {
            return Err(invalid("dataset.split.base_class_count", "must be >= 1"));
        }
        if d.split.session_count > 0 && (d.split.way == 0 || d.split.shot == 0) {
            return Err(invalid("dataset.split.way", "way and shot must be >= 1"));
        }
        if d.split.test_per_class == 0 {
            return Err(invalid("dataset.split.test_per_class", "must be >= 1"));
        }

        let m = &self.model;
        if m.embed_dim == 0 {
            return Err(invalid("model.embed_dim", "must be >= 1"));
        }
        if m.calib_hidden == 0 {
            return Err(invalid("model.calib_hidden", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&m.dropout_p) {
            return Err(invalid("model.dropout_p", "must be in [0, 1)"));
        }

        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        self.train
            .meta
            .fake_task
            .validate(d.split.base_class_count)
            .map_err(|e| invalid("train.meta.fake_task", e.to_string()))?;
        Ok(())
    }

    /// Full width list for the embedding net: input, hidden, embedding.
    pub fn embed_widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend_from_slice(&self.model.hidden_widths);
        w.push(self.model.embed_dim);
        w
    }
}

/// Set a leaf in a JSON tree by dotted path; the value parses as JSON
/// first (numbers, bools) and falls back to a string.
pub fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    if path.is_empty() {
        return Err(ConfigError::BadOverride(spec.into()));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::BadOverride(spec.into()))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| ConfigError::BadOverride(spec.into()))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A small complete config, the starting point for `--set` overrides and
/// the basis of the examples in the README.
pub fn example_config() -> RunConfig {
    use crate::sampler::FakeTaskSpec;
    use crate::train::{FinetuneConfig, MetaConfig, PretrainConfig};
    RunConfig {
        dataset: DatasetConfig {
            source: DataSource::Synth,
            num_classes: 60,
            dim: 64,
            per_class: 50,
            spread: 1.0,
            csv_path: None,
            split: SplitSpec {
                base_class_count: 40,
                way: 5,
                shot: 5,
                session_count: 4,
                test_per_class: 15,
                seed: 1,
            },
        },
        model: ModelConfig {
            hidden_widths: vec![64, 64],
            embed_dim: 32,
            calib_hidden: 64,
            dropout_p: 0.5,
            norm_before_dropout: false,
        },
        train: TrainConfig {
            pretrain: PretrainConfig {
                lr: 0.05,
                momentum: 0.9,
                epochs: 100,
                batch_size: 128,
            },
            meta: MetaConfig {
                lr: 0.0002,
                decay_factor: 0.5,
                decay_every_iters: 1000,
                iterations: 2000,
                fake_task: FakeTaskSpec {
                    phases: 2,
                    fake_way: 5,
                    fake_shot: 5,
                    query_shot: 10,
                },
            },
            finetune: FinetuneConfig { lr: 0.01, steps: 40 },
            kd_lambda: 0.5,
            seed: 1,
        },
    }
}
