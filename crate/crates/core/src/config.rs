//! Experiment configuration: one TOML document covering data synthesis,
//! both model stages, training, and evaluation, with dotted-key command
//! line overrides. Unknown keys anywhere are rejected so typos cannot
//! silently fall back to defaults.

use crate::engine::TrainConfig;
use crate::error::{DvtError, Result};
use crate::eval::InferenceMode;
use crate::refiner::RefinerConfig;
use crate::synth::SynthConfig;
use crate::tracker::TrackerConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Reference full-scale parameter counts the `params` report compares
/// against (tracker / refiner, in raw scalars).
pub const FULL_SCALE_TRACKER_PARAMS: f64 = 9.68e6;
pub const FULL_SCALE_REFINER_PARAMS: f64 = 14.41e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub tracker: TrainConfig,
    pub refiner: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            tracker: TrainConfig::default(),
            refiner: TrainConfig::refiner_default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Online,
    SemiOnline,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: ModeName,
    pub semi_online_len: usize,
    /// The held-out evaluation dataset reuses the synth config with its
    /// seed shifted by this offset, so train and eval videos never
    /// coincide.
    pub seed_offset: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mode: ModeName::Offline,
            semi_online_len: 6,
            seed_offset: 1000,
        }
    }
}

impl EvalSection {
    pub fn mode(&self) -> InferenceMode {
        match self.mode {
            ModeName::Online => InferenceMode::Online,
            ModeName::SemiOnline => InferenceMode::SemiOnline(self.semi_online_len),
            ModeName::Offline => InferenceMode::Offline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub tracker: TrackerConfig,
    pub refiner: RefinerConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.tracker.validate()?;
        self.refiner.validate()?;
        self.train.tracker.validate()?;
        self.train.refiner.validate()?;
        self.eval.mode().validate()?;
        if self.tracker.dim != self.synth.dim || self.tracker.classes != self.synth.classes {
            return Err(DvtError::Config(format!(
                "tracker (dim {}, classes {}) does not match synth (dim {}, classes {})",
                self.tracker.dim, self.tracker.classes, self.synth.dim, self.synth.classes
            )));
        }
        if self.refiner.dim != self.synth.dim || self.refiner.classes != self.synth.classes {
            return Err(DvtError::Config(format!(
                "refiner (dim {}, classes {}) does not match synth (dim {}, classes {})",
                self.refiner.dim, self.refiner.classes, self.synth.dim, self.synth.classes
            )));
        }
        Ok(())
    }

    /// The exact effective configuration, suitable for re-running.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DvtError::Config(e.to_string()))
    }
}

/// Full-scale model shapes used only for the parameter-count report; the
/// synthetic pipeline never instantiates tensors of this size.
pub fn full_scale_configs() -> (TrackerConfig, RefinerConfig) {
    (
        TrackerConfig {
            dim: 256,
            classes: 40,
            ..TrackerConfig::default()
        },
        RefinerConfig {
            dim: 256,
            classes: 40,
            ..RefinerConfig::default()
        },
    )
}

fn config_error(e: impl std::fmt::Display) -> DvtError {
    DvtError::Config(e.to_string())
}

/// Parses a TOML document and applies `key.path=value` overrides before
/// typed deserialization, so overrides face the same unknown-key and type
/// checks as the file itself.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = toml::from_str(text).map_err(config_error)?;
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let cfg: ExperimentConfig = doc.try_into().map_err(config_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, overrides)
}

/// One override: dotted key path, `=`, TOML literal. A value that fails to
/// parse as a TOML literal is taken as a bare string.
fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        DvtError::Config(format!("override `{spec}` is not of the form key.path=value"))
    })?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(DvtError::Config(format!("override `{spec}` has an empty key")));
    }
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            DvtError::Config(format!("override `{path}`: `{part}` is not a table"))
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        DvtError::Config(format!("override `{path}` points into a non-table value"))
    })?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
