//! Run configuration: JSON files merged onto defaults, then dotted overrides.

use std::fs;
use std::path::{Path, PathBuf};

use hdmae::masking::default_contour;
use hdmae::optim::{AdamWConfig, Schedule};
use hdmae::phantom::PhantomConfig;
use hdmae::rng::{sub_seed, Purpose};
use hdmae::trainer::{MaskSettings, TrainConfig};
use hdmae::ViTConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RESOLVED_NAME: &str = "config.resolved.json";

/// Errors the CLI reports with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Pre-training phantoms.
    pub count: usize,
    pub lesion_fraction: f64,
    pub phantom: PhantomConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 256,
            lesion_fraction: 0.5,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_count: usize,
    pub eval_count: usize,
    pub lesion_fraction: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_count: 256,
            eval_count: 256,
            lesion_fraction: 0.5,
            steps: 2000,
            lr: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of all randomness in a run.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ViTConfig,
    pub optim: AdamWConfig,
    pub schedule: Schedule,
    pub warmup_steps: Option<u64>,
    pub batch_size: usize,
    pub epochs: u64,
    pub max_steps: Option<u64>,
    pub accum_steps: usize,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: Option<u64>,
    pub mask: MaskSettings,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/hdmae"),
            model: t.model,
            optim: t.optim,
            schedule: t.schedule,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_steps: t.max_steps,
            accum_steps: t.accum_steps,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            mask: t.mask,
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            optim: self.optim,
            schedule: self.schedule,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            accum_steps: self.accum_steps,
            clip_norm: self.clip_norm,
            seed: self.seed,
            mask: self.mask,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Dataset seeds per split; distinct seeds never share sample seeds.
    pub fn pretrain_data_seed(&self) -> u64 {
        sub_seed(self.seed, Purpose::Data)
    }

    pub fn probe_data_seeds(&self) -> (u64, u64) {
        let base = sub_seed(self.seed, Purpose::Probe);
        (base, base + 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_config().validate().map_err(|e| err(e.to_string()))?;
        self.data.phantom.validate().map_err(|e| err(e.to_string()))?;
        default_contour(self.model.patch.grid_side(), 0.5).map_err(|e| err(e.to_string()))?;
        let fraction = |f: f64| (0.0..=1.0).contains(&f);
        if self.data.count == 0 || !fraction(self.data.lesion_fraction) {
            return Err(err("data.count must be positive and data.lesion_fraction in [0, 1]"));
        }
        let p = &self.probe;
        if p.train_count < 2 || p.eval_count < 2 || !(p.lesion_fraction > 0.0 && p.lesion_fraction < 1.0) {
            return Err(err("probe splits need at least two samples and both classes"));
        }
        if !(p.lr > 0.0) {
            return Err(err("probe.lr must be positive"));
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| err(format!("config {} is not valid JSON: {e}", path.display())))?;
            merge(&mut tree, patch, "")?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| err(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(dir.join(RESOLVED_NAME), text)
    }
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), ConfigError> {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (k, v) in patch {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = base.get_mut(&k).ok_or_else(|| err(format!("unknown config key {full:?}")))?;
                merge(slot, v, &full)?;
            }
            Ok(())
        }
        (base, patch) => {
            *base = patch;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON, or taken as a string.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| err(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(err(format!("override key {key:?} has an empty segment")));
        }
        patch = Value::Object([(part.to_string(), patch)].into_iter().collect());
    }
    merge(tree, patch, "")
}
