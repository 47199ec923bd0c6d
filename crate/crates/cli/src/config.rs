//! `key = value` run configuration files.

use std::collections::BTreeMap;
use std::path::Path;

use modnmt_core::model::ArchConfig;
use modnmt_core::objective::{DistanceKind, DistanceMetric};
use modnmt_core::trainer::TrainingConfig;

use crate::CliError;

/// Keys accepted in a config file and as `--set key=value` overrides.
pub const KNOWN_KEYS: &[&str] = &[
    "steps",
    "batch_tokens",
    "lr_peak",
    "warmup_steps",
    "seed",
    "metric",
    "metric_weight",
    "eval_every",
    "d_model",
    "blocks",
    "heads",
    "ff",
    "accum_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "vocab_size",
    "max_words",
    "log_every",
    "data",
    "src",
    "tgt",
    "new",
    "pivot",
    "both_directions",
];

/// Parsed configuration. Later insertions override earlier ones, so file
/// values are loaded first and command-line flags applied on top.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Training configuration with defaults for every missing key.
    pub fn training(&self) -> Result<TrainingConfig, CliError> {
        let d = TrainingConfig::default();
        let arch = ArchConfig {
            d_model: self.parsed_or("d_model", d.arch.d_model)?,
            blocks: self.parsed_or("blocks", d.arch.blocks)?,
            heads: self.parsed_or("heads", d.arch.heads)?,
            ff: self.parsed_or("ff", d.arch.ff)?,
        };
        let kind = match self.get("metric") {
            Some(s) => s
                .parse::<DistanceKind>()
                .map_err(|e| CliError::Usage(e.to_string()))?,
            None => d.metric.kind,
        };
        let weight = self.parsed_or("metric_weight", d.metric.weight)?;
        let metric = DistanceMetric::new(kind, weight).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut adam = d.adam;
        adam.beta1 = self.parsed_or("adam_beta1", adam.beta1)?;
        adam.beta2 = self.parsed_or("adam_beta2", adam.beta2)?;
        adam.epsilon = self.parsed_or("adam_epsilon", adam.epsilon)?;
        let cfg = TrainingConfig {
            steps: self.parsed_or("steps", d.steps)?,
            batch_tokens: self.parsed_or("batch_tokens", d.batch_tokens)?,
            lr_peak: self.parsed_or("lr_peak", d.lr_peak)?,
            warmup_steps: self.parsed_or("warmup_steps", d.warmup_steps)?,
            seed: self.parsed_or("seed", d.seed)?,
            metric,
            eval_every: self.parsed_or("eval_every", d.eval_every)?,
            arch,
            accum_steps: self.parsed_or("accum_steps", d.accum_steps)?,
            adam,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
