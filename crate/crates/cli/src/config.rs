//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `preset` (`desk` or
//! `full`) selects the training defaults and is applied before every other
//! key regardless of where it appears.

use std::fmt;

use derain_core::{FusionMode, NetworkConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: &[&str] = &[
    "preset",
    "num_blocks",
    "max_dilation",
    "channels",
    "fusion_mode",
    "input_channels",
    "seed",
    "batch_size",
    "base_lr",
    "decay_iters",
    "total_iters",
    "patch",
    "alpha",
    "sample_seed",
    "checkpoint_every",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        let (presets, rest): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|(k, _)| k == "preset");
        for (k, v) in presets.iter().chain(&rest) {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Sets one field. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (n, t) = (&mut self.net, &mut self.train);
        match key {
            "preset" => {
                *t = match value {
                    "desk" => TrainConfig::desk(),
                    "full" => TrainConfig::default(),
                    other => return Err(ConfigError(format!("preset: unknown preset {other:?}"))),
                }
            }
            "num_blocks" => n.num_blocks = parse(key, value)?,
            "max_dilation" => n.max_dilation = parse(key, value)?,
            "channels" => n.channels = parse(key, value)?,
            "fusion_mode" => {
                n.fusion_mode = value.parse::<FusionMode>().map_err(|e| ConfigError(format!("{key}: {e}")))?
            }
            "input_channels" => n.input_channels = parse(key, value)?,
            "seed" => n.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "decay_iters" => {
                t.decay_iters = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            "total_iters" => t.total_iters = parse(key, value)?,
            "patch" => t.patch = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "sample_seed" => t.seed = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            other => {
                return Err(ConfigError(format!(
                    "unknown key {other:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.net.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train.validate(&self.net).map_err(|e| ConfigError(e.to_string()))
    }
}
