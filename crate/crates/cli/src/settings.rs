//! Merges defaults, a `key = value` config file and command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use segtransvae::model::{parse_kv, ModelConfig};
use segtransvae::train::TrainConfig;

/// Bad configuration or flag values; reported with the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn usage_from(e: segtransvae::Error) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { model: ModelConfig::desk(), train: TrainConfig::default() }
    }
}

impl Settings {
    /// `seed` sets both the model and the training seed; any other key must
    /// belong to one of the two configs.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.model.set("model_seed", value).map_err(usage_from)?;
            self.train.set("train_seed", value).map_err(usage_from)?;
            return Ok(());
        }
        if !self.model.set(key, value).map_err(usage_from)? && !self.train.set(key, value).map_err(usage_from)? {
            return usage(format!("unknown config key {key:?}"));
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text).map_err(usage_from)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// A preset name (`desk`, `desk2x`, `full`) or a config file on top of
    /// the desk defaults.
    pub fn from_source(source: Option<&str>) -> Result<Self> {
        let mut s = Settings::default();
        let Some(src) = source else { return Ok(s) };
        if let Some(model) = ModelConfig::preset(src) {
            s.model = model;
            return Ok(s);
        }
        let path = Path::new(src);
        if !path.is_file() {
            return usage(format!("config {src:?} is neither a preset (desk, desk2x, full) nor a readable file"));
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Err(e) = s.apply_text(&text) {
            return usage(format!("in config file {}: {e}", path.display()));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(usage_from)?;
        self.train.validate().map_err(usage_from)
    }

    /// Effective settings as a config file that reproduces them.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let clip = t.clip_norm.map_or_else(|| "none".to_string(), |c| format!("{c:?}"));
        format!(
            "{}lr0 = {:?}\ntotal_steps = {}\nbatch_size = {}\nbeta1 = {:?}\nbeta2 = {:?}\nadam_eps = {:?}\npoly_power = {:?}\n\
             train_seed = {}\ncheckpoint_interval = {}\neval_interval = {}\nclip_norm = {clip}\nworkers = {}\nflip_prob = {:?}\n",
            self.model.to_kv(),
            t.lr0,
            t.total_steps,
            t.batch_size,
            t.beta1,
            t.beta2,
            t.adam_eps,
            t.poly_power,
            t.seed,
            t.checkpoint_interval,
            t.eval_interval,
            t.workers,
            t.flip_prob,
        )
    }
}
