//! Run configuration: one TOML file with a section per component, a root
//! seed, and `section.key=value` overrides applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::croplab::CropParams;
use crate::dataset::{SceneConfig, UpscalePolicy};
use crate::detect::{OracleNoiseModel, ToyModelConfig};
use crate::error::ConfigError;
use crate::experiment::BenchmarkConfig;
use crate::infer::InferenceConfig;
use crate::metrics::EvalConfig;
use crate::teacher::TrainerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub label_fraction: f64,
    /// Train on the labeled part only and ignore the unlabeled images.
    pub labeled_only: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            label_fraction: 0.1,
            labeled_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    pub size: f64,
    pub stride: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            size: 512.0,
            stride: 448.0,
        }
    }
}

/// Everything a command may read. `[crop]` and `upscale` are the single
/// source for the copies held by the model, trainer and inference sections,
/// and `seed` drives every random stream; see [`Config::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for data-parallel sections, 0 for all cores.
    pub workers: usize,
    pub upscale: UpscalePolicy,
    pub scene: SceneConfig,
    pub split: SplitConfig,
    pub tile: TileConfig,
    pub crop: CropParams,
    pub model: ToyModelConfig,
    pub trainer: TrainerConfig,
    pub inference: InferenceConfig,
    pub noise: OracleNoiseModel,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        Self {
            seed: 0,
            workers: 0,
            upscale: UpscalePolicy::default(),
            scene: bench.scene,
            split: SplitConfig {
                label_fraction: bench.label_fraction,
                labeled_only: false,
            },
            tile: TileConfig::default(),
            crop: CropParams::default(),
            model: bench.model,
            trainer: bench.trainer,
            inference: bench.inference,
            noise: OracleNoiseModel::default(),
            eval: bench.eval,
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so `--set inference.crop_mode=relabeled` works unquoted.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `a.b.c=value` as a nested table.
pub fn override_table(assignment: &str) -> Result<toml::Value, ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new(assignment, "expected key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::new(key, "malformed key"));
    }
    let mut value = parse_value(raw.trim());
    for part in key.rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), value);
        value = toml::Value::Table(t);
    }
    Ok(value)
}

impl Config {
    /// Defaults, then the file (if any), then each override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config, ConfigError> {
        let mut value = toml::Value::try_from(Config::default()).map_err(|e| ConfigError::new("config", e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
            let parsed: toml::Value =
                toml::from_str(&text).map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
            merge(&mut value, parsed);
        }
        for o in overrides {
            merge(&mut value, override_table(o)?);
        }
        let config: Config = value.try_into().map_err(|e: toml::de::Error| {
            ConfigError::new("config", e.message().to_string())
        })?;
        let config = config.resolved();
        config.validate()?;
        Ok(config)
    }

    /// Copy with shared settings pushed into every section that holds them.
    pub fn resolved(&self) -> Config {
        let mut c = self.clone();
        c.scene.seed = c.seed;
        c.trainer.seed = c.seed;
        c.model.proposals.seed = c.seed;
        c.model.observation.seed = c.seed;
        c.noise.seed = c.seed;
        c.model.num_classes = c.scene.num_classes;
        c.model.payload_dim = c.scene.payload_dim;
        c.model.crop_params = c.crop;
        c.trainer.crop_params = c.crop;
        c.inference.crop_params = c.crop;
        c.trainer.upscale = c.upscale;
        c.inference.upscale = c.upscale;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.upscale.validate()?;
        self.crop.validate()?;
        self.scene.validate()?;
        self.model.validate()?;
        self.trainer.validate()?;
        self.inference.validate()?;
        self.noise.validate()?;
        if !(self.split.label_fraction > 0.0 && self.split.label_fraction <= 1.0) {
            return Err(ConfigError::new("split.label_fraction", "must lie in (0, 1]"));
        }
        if !(self.tile.size > 0.0 && self.tile.stride > 0.0) {
            return Err(ConfigError::new("tile", "size and stride must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
