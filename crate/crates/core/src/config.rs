//! The run configuration: every sub-config plus data, experiment and path
//! settings, loaded from one TOML file with dotted `key=value` overrides.
//!
//! Module seeds are never read from the file. They are derived from the
//! master `seed` with [`crate::seed::derive_seed`] under these labels:
//!
//! | stream                     | label                          |
//! |----------------------------|--------------------------------|
//! | dataset generation traffic | `gen/<scenario>/<run>`         |
//! | experiment traffic         | `experiment/<scenario>/<run>`  |
//! | weight initialization      | `model/init`                   |
//! | train/validation/test split| `data/split`                   |
//! | shuffling, dropout         | `training/shuffle`, `training/dropout` (keyed by the master seed) |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::PolicyConfig;
use crate::error::{Error, Result};
use crate::fls::FlsConfig;
use crate::nn::ModelConfig;
use crate::sim::{Scenario, SimConfig};
use crate::telemetry::{Feature, SplitFractions};
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Uncontrolled simulator runs generated per scenario.
    pub runs_per_scenario: usize,
    pub scenarios: Vec<Scenario>,
    /// Model inputs, in column order.
    pub features: Vec<Feature>,
    pub split: SplitFractions,
    /// Keep window order instead of shuffling before the split.
    pub chronological: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            runs_per_scenario: 84,
            scenarios: Scenario::ALL.to_vec(),
            features: Feature::ALL.to_vec(),
            split: SplitFractions::default(),
            chronological: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Paired seeds per scenario.
    pub runs: usize,
    pub scenarios: Vec<Scenario>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            scenarios: Scenario::ALL.to_vec(),
        }
    }
}

/// Output locations. Unset dataset and checkpoint paths resolve inside
/// `<output_dir>/<run_id>/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    pub run_id: String,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            run_id: "default".into(),
            dataset_dir: None,
            checkpoint: None,
        }
    }
}

impl PathsConfig {
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.run_dir().join("telemetry"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir().join("checkpoint").join("model.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed.
    pub seed: u64,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub policy: PolicyConfig,
    pub fls: FlsConfig,
    pub data: DataConfig,
    pub experiment: ExperimentConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            policy: PolicyConfig::default(),
            fls: FlsConfig::default(),
            data: DataConfig::default(),
            experiment: ExperimentConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Splits `key=value`; a leading `--` is ignored.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    match body.split_once('=') {
        Some((key, value)) if !key.is_empty() => Ok((key.to_string(), value.to_string())),
        _ => Err(Error::Config(format!("override `{arg}` is not of the form key=value"))),
    }
}

/// A TOML literal when the text parses as one, otherwise a bare string.
fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets the dotted `key` in `root`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(last.to_string(), override_value(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (defaults when `None`) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// SHA-256 of the configuration with `paths` reset, so relocating the
    /// output does not change the digest.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.paths = PathsConfig::default();
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.policy.validate()?;
        self.fls.validate()?;
        if self.data.features.is_empty() {
            return Err(Error::Config("data.features must not be empty".into()));
        }
        if self.data.features.len() != self.model.features {
            return Err(Error::Config(format!(
                "model.features is {} but data.features lists {}",
                self.model.features,
                self.data.features.len()
            )));
        }
        if (self.policy.control_interval_s - self.sim.telemetry_interval_s).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "policy.control_interval_s {} differs from sim.telemetry_interval_s {}",
                self.policy.control_interval_s, self.sim.telemetry_interval_s
            )));
        }
        if self.data.runs_per_scenario == 0 || self.data.scenarios.is_empty() {
            return Err(Error::Config("data needs at least one scenario and one run".into()));
        }
        if self.experiment.runs == 0 || self.experiment.scenarios.is_empty() {
            return Err(Error::Config("experiment needs at least one scenario and one run".into()));
        }
        if self.paths.run_id.is_empty() || self.paths.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("paths.run_id `{}` must be a plain name", self.paths.run_id)));
        }
        Ok(())
    }

    /// Simulator settings for one scenario under a derived traffic seed.
    pub fn sim_for(&self, scenario: Scenario, seed: u64) -> SimConfig {
        SimConfig {
            scenario,
            seed,
            ..self.sim.clone()
        }
    }

    /// Training settings keyed by the master seed.
    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training
        }
    }
}
