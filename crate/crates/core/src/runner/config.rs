//! Training configuration files (TOML, versioned) and hyperparameter
//! profiles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::scene::VectorizeConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variables that may override the configured paths.
pub const ENV_TRAIN_DATA: &str = "MTR_TRAIN_DATA";
pub const ENV_INTENTIONS: &str = "MTR_INTENTIONS";
pub const ENV_OUTPUT_DIR: &str = "MTR_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train_data: PathBuf,
    pub intentions: PathBuf,
    /// Directory for checkpoints and the training log.
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_data: "data/train.jsonl".into(),
            intentions: "data/intentions.jsonl".into(),
            output_dir: "runs/desk".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lr_decay_start_epoch: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lambda_cls: f64,
    pub seed: u64,
    /// Fraction of scenes (by scene id hash) held out for validation.
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub vectorize: VectorizeConfig,
    pub paths: PathsConfig,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            learning_rate: 1e-4,
            batch_size: 80,
            epochs: 60,
            lr_decay_factor: 0.5,
            lr_decay_every: 5,
            lr_decay_start_epoch: 30,
            weight_decay: 0.01,
            grad_clip: 10.0,
            lambda_cls: 1.0,
            seed: 0,
            val_fraction: 0.1,
            model: ModelConfig::paper(),
            vectorize: VectorizeConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Small model and short schedule for single-CPU runs.
    pub fn desk() -> Self {
        Self {
            learning_rate: DESK_LEARNING_RATE,
            batch_size: 16,
            epochs: 30,
            model: ModelConfig::desk(),
            vectorize: VectorizeConfig {
                max_polylines: Some(DESK_MAX_POLYLINES),
                ..VectorizeConfig::default()
            },
            ..Self::paper()
        }
    }

    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_decay_factor", self.lr_decay_factor),
            ("grad_clip", self.grad_clip),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "batch_size, epochs and lr_decay_every must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.lambda_cls < 0.0 || self.lr_decay_factor > 1.0 {
            return Err(Error::Config(
                "weight_decay and lambda_cls must be non-negative, lr_decay_factor at most 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.vectorize.max_points_per_polyline != self.model.max_points_per_polyline {
            return Err(Error::Config(
                "vectorize.max_points_per_polyline must match the model".into(),
            ));
        }
        self.model.validate()
    }

    /// Parses a TOML config and applies path overrides from the environment.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_env_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_env_overrides(&mut self) {
        if let Ok(v) = std::env::var(ENV_TRAIN_DATA) {
            self.paths.train_data = v.into();
        }
        if let Ok(v) = std::env::var(ENV_INTENTIONS) {
            self.paths.intentions = v.into();
        }
        if let Ok(v) = std::env::var(ENV_OUTPUT_DIR) {
            self.paths.output_dir = v.into();
        }
    }
}

pub const DESK_LEARNING_RATE: f64 = 5e-4;
pub const DESK_MAX_POLYLINES: usize = 64;

/// Base rate before `lr_decay_start_epoch`, then one multiplicative decay
/// at the start epoch and at every `lr_decay_every` epochs after it.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_decay_start_epoch {
        return cfg.learning_rate;
    }
    let decays = (epoch - cfg.lr_decay_start_epoch) / cfg.lr_decay_every + 1;
    cfg.learning_rate * cfg.lr_decay_factor.powi(decays as i32)
}
