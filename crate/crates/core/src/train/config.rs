use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cdn::NoiseConfig;
use crate::data::{AugmentConfig, SliceSpec};
use crate::dpm::DpmConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-4,
            lr_rest: 1e-5,
            weight_decay: 1e-4,
            grad_clip: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifests, relative to the working directory.
    pub train: Vec<String>,
    /// Evaluation manifests; the training manifests are used when empty.
    pub eval: Vec<String>,
}

/// Everything that determines a run. Persisted verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Iterations between metrics-log lines.
    pub log_every: usize,
    /// Iterations between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Confidence needed to report a detection.
    pub threshold: f64,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub dpm: DpmConfig,
    pub cdn: NoiseConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub slice: SliceSpec,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 160_000,
            batch_size: 1,
            log_every: 10,
            checkpoint_every: 0,
            threshold: 0.3,
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            dpm: DpmConfig::default(),
            cdn: NoiseConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            slice: SliceSpec::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dpm.validate()?;
        self.cdn.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.slice.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold = {} not in [0, 1]", self.threshold)));
        }
        let o = &self.optim;
        if !(o.lr_backbone >= 0.0 && o.lr_rest >= 0.0 && o.weight_decay >= 0.0 && o.grad_clip >= 0.0) {
            return Err(Error::Config("optim values must be >= 0".into()));
        }
        if !self.slice.patch_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "slice.patch_size = {} must be a multiple of 32",
                self.slice.patch_size
            )));
        }
        if self.augment.sizes.is_empty() || self.augment.sizes.iter().any(|s| s % 32 != 0) {
            return Err(Error::Config("augment.sizes must be non-empty multiples of 32".into()));
        }
        let min_size = *self.augment.sizes.iter().chain([&self.slice.patch_size]).min().expect("non-empty");
        let tokens: usize = crate::model::backbone::LEVEL_STRIDES
            .iter()
            .map(|s| (min_size as usize / s).pow(2))
            .sum();
        if self.model.num_queries > tokens {
            return Err(Error::Config(format!(
                "model.num_queries = {} exceeds the {tokens} feature tokens of a {min_size}px input",
                self.model.num_queries
            )));
        }
        Ok(())
    }

    /// Parses TOML, applies `key.path=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every leaf key with its default value, one `key = value` per line.
    pub fn describe_keys() -> Vec<String> {
        let value = toml::Value::try_from(RunConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Sets `a.b.c=value`; the value is read as TOML and falls back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_type_checked() {
        let cfg = RunConfig::from_toml("seed = 1\n", &["model.num_queries=100".into(), "dpm.mode=off".into()]).unwrap();
        assert_eq!(cfg.model.num_queries, 100);
        assert_eq!(cfg.dpm.mode, crate::dpm::DpmMode::Off);
        assert!(RunConfig::from_toml("", &["model.num_queries=lots".into()]).is_err());
        assert!(RunConfig::from_toml("", &["model.bogus=1".into()]).is_err());
        assert!(RunConfig::from_toml("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn too_many_queries_rejected() {
        let err = RunConfig::from_toml("", &[]).unwrap_err();
        assert!(err.to_string().contains("num_queries"), "{err}");
    }

    #[test]
    fn partial_sections_take_defaults() {
        let text = "[model]\nnum_queries = 100\n[slice]\noverlap = 0.5\n[augment]\nhflip = false\n";
        let cfg = RunConfig::from_toml(text, &[]).unwrap();
        assert_eq!(cfg.slice.patch_size, 96);
        assert_eq!(cfg.slice.overlap, 0.5);
        assert!(cfg.augment.vflip);
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.num_queries = 100;
        let back = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn keys_listed() {
        let keys = RunConfig::describe_keys();
        assert!(keys.iter().any(|k| k.starts_with("dpm.use_memory_bank = ")));
        assert!(keys.iter().any(|k| k.starts_with("optim.lr_backbone = ")));
    }
}
