//! Run configuration: defaults, then a data directory's frozen copy, then
//! `--config`, then flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stoei::dataset::SynthConfig;
use stoei::model::ModelConfig;
use stoei::trainer::{PretrainConfig, TrainConfig};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// train / dev / test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratios: [2000.0 / 2700.0, 200.0 / 2700.0, 500.0 / 2700.0], seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Defaults, overlaid by `dir/config.toml` when present, then by
    /// `explicit`.
    pub fn resolve(dir: Option<&Path>, explicit: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file()) {
            cfg = Self::from_file(&p)?;
        }
        if let Some(p) = explicit {
            cfg = merge(&cfg, &fs::read_to_string(p).map_err(|e| CliError::io(p, e))?, p)?;
        }
        Ok(cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Overlays the keys present in `text` onto `base`.
fn merge(base: &RunConfig, text: &str, path: &Path) -> Result<RunConfig, CliError> {
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut value = toml::Value::try_from(base).map_err(|e| bad(e.to_string()))?;
    let overlay: toml::Table = toml::from_str(text).map_err(|e| bad(e.message().to_string()))?;
    overlay_into(&mut value, toml::Value::Table(overlay));
    value.try_into().map_err(|e: toml::de::Error| bad(e.message().to_string()))
}

fn overlay_into(dst: &mut toml::Value, src: toml::Value) {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => overlay_into(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
