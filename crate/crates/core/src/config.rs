//! Training configuration: strict JSON schema, named presets, and dotted-path
//! overrides so single fields can be changed from the command line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Upper bound on the per-batch masked-vertex ratio; 0 disables masking.
    pub mask_ratio: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            epochs: 2,
            batch_size: 8,
            mask_ratio: 0.3,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::config("base_lr must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig::default()
    }

    pub fn paper_lineage() -> Self {
        TrainConfig {
            model: ModelConfig::paper_lineage(),
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "paper-lineage" => Ok(TrainConfig::paper_lineage()),
            other => Err(Error::config(format!(
                "unknown preset {other}, expected desk|paper-lineage"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(Error::from)
    }

    /// Replace one field addressed by a dotted path, e.g.
    /// `optim.base_lr=0.002` or `model.encoder.layers_per_block=2`. The value
    /// is parsed as JSON first and falls back to a bare string.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        self.with_overrides(&[(key.to_string(), raw.to_string())])
    }

    /// Apply several overrides, then validate the final config once. Keys are
    /// order-independent, so a width change and its matching head count can
    /// arrive in any order.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(self).map_err(Error::from)?;
        for (key, raw) in pairs {
            let parts: Vec<&str> = key.split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(Error::config(format!("malformed override key {key}")));
            }
            let pointer = format!("/{}", parts.join("/"));
            let slot = root
                .pointer_mut(&pointer)
                .ok_or_else(|| Error::config(format!("unknown config field {key}")))?;
            *slot = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        }
        let cfg: TrainConfig = serde_json::from_value(root)
            .map_err(|e| Error::config(format!("config overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Split a `key=value` command-line argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::config(format!(
            "override must look like key.path=value, got {arg}"
        ))),
    }
}
