//! Experiment configuration: one JSON document plus `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use posecast::metrics::MetricOptions;
use posecast::synth::{SweepSize, SynthConfig};
use posecast::train::TrainConfig;

use crate::CliError;

fn default_samples() -> usize {
    100
}

fn default_sweep_samples() -> usize {
    500
}

fn default_sizes() -> Vec<SweepSize> {
    [64, 32, 16, 8].into_iter().map(SweepSize::square).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<SweepSize>,
    #[serde(default = "default_sweep_samples")]
    pub samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: default_sizes(),
            samples: default_sweep_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory used when a command gets no `--out`.
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: Option<SynthConfig>,
    /// Dataset size for `gen`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

impl ExperimentConfig {
    /// Reads `path` (or an empty document), applies `key=value` overrides
    /// and validates every present section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| CliError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(s) = &self.synth {
            s.validate().map_err(CliError::from_validation)?;
        }
        if let Some(t) = &self.train {
            t.validate().map_err(CliError::from_validation)?;
        }
        self.metrics.validate().map_err(CliError::from_validation)?;
        if self.sweep.sizes.is_empty() {
            return Err(CliError::config("sweep.sizes must not be empty"));
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<&SynthConfig, CliError> {
        self.synth
            .as_ref()
            .ok_or_else(|| CliError::config("configuration has no \"synth\" section"))
    }

    pub fn train(&self) -> Result<&TrainConfig, CliError> {
        self.train
            .as_ref()
            .ok_or_else(|| CliError::config("configuration has no \"train\" section"))
    }
}

/// Sets the dotted path `key` to `value`, parsed as JSON when possible and
/// as a plain string otherwise. Missing objects along the path are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(CliError::config(format!(
                    "override {key:?}: {:?} is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last path component")
}
