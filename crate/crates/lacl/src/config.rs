//! Flat run configuration. One key space covers the encoder, the training
//! loop, the augmentation policy, and evaluation knobs, so a single TOML file
//! plus command-line overrides describes a whole run.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::augment::{AugmentOp, AugmentPolicy, Sidecar};
use crate::encoder::EncoderConfig;
use crate::head::GclSharing;
use crate::trainer::{TrainConfig, TrainMode, TrainVariant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config read failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {why}")]
    BadValue { key: String, why: String },
}

fn bad(key: &str, why: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), why: why.into() }
}

/// Every tunable of a run, in one flat struct. `seed` stays optional so the
/// command line and the `LACL_SEED` environment variable can fill it in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout_p: f64,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub margin: f64,
    pub seed: Option<u64>,
    pub mode: TrainMode,
    pub variant: TrainVariant,
    pub gcl_sharing: GclSharing,
    pub g_hidden: Option<usize>,
    pub rsm_rate: f64,
    pub rsm_span: usize,
    pub cutoff_rate: f64,
    pub sidecar: Option<PathBuf>,
    pub view1: Vec<AugmentOp>,
    pub view2: Vec<AugmentOp>,
    pub ridge: f64,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AugmentPolicy::default();
        RunConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            ff_mult: 4,
            dropout_p: 0.1,
            max_len: 32,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_peak: t.lr_peak,
            weight_decay: t.weight_decay,
            tau: t.tau,
            lambda1: t.lambda1,
            margin: t.margin,
            seed: None,
            mode: t.mode,
            variant: t.variant,
            gcl_sharing: t.gcl_sharing,
            g_hidden: t.g_hidden,
            rsm_rate: a.rsm_rate,
            rsm_span: a.rsm_span,
            cutoff_rate: a.cutoff_rate,
            sidecar: None,
            view1: a.view1,
            view2: a.view2,
            ridge: crate::scoring::DEFAULT_RIDGE,
            bins: 30,
        }
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize, ConfigError> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => Err(bad(key, format!("expected a non-negative integer, got {v}"))),
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| bad(key, format!("expected a number, got {v}")))
}

fn as_str<'v>(key: &str, v: &'v toml::Value) -> Result<&'v str, ConfigError> {
    v.as_str().ok_or_else(|| bad(key, format!("expected a string, got {v}")))
}

fn parse_ops(key: &str, raw: &str) -> Result<Vec<AugmentOp>, ConfigError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| AugmentOp::from_str(s).map_err(|e| bad(key, e.to_string())))
        .collect()
}

impl RunConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let table: toml::Table = raw.parse()?;
        for (key, value) in &table {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies one key. Shared by the file loader and command-line overrides
    /// so both reject unknown keys identically.
    pub fn set(&mut self, key: &str, value: &toml::Value) -> Result<(), ConfigError> {
        match key {
            "layers" => self.layers = as_usize(key, value)?,
            "dim" => self.dim = as_usize(key, value)?,
            "heads" => self.heads = as_usize(key, value)?,
            "ff_mult" => self.ff_mult = as_usize(key, value)?,
            "dropout_p" => self.dropout_p = as_f64(key, value)?,
            "max_len" => self.max_len = as_usize(key, value)?,
            "epochs" => self.epochs = as_usize(key, value)?,
            "batch_size" => self.batch_size = as_usize(key, value)?,
            "lr_peak" => self.lr_peak = as_f64(key, value)?,
            "weight_decay" => self.weight_decay = as_f64(key, value)?,
            "tau" => self.tau = as_f64(key, value)?,
            "lambda1" => self.lambda1 = as_f64(key, value)?,
            "margin" => self.margin = as_f64(key, value)?,
            "seed" => self.seed = Some(as_usize(key, value)? as u64),
            "mode" => {
                self.mode = TrainMode::from_str(as_str(key, value)?)
                    .map_err(|e| bad(key, e.to_string()))?
            }
            "variant" => {
                self.variant = TrainVariant::from_str(as_str(key, value)?)
                    .map_err(|e| bad(key, e.to_string()))?
            }
            "gcl_sharing" => {
                self.gcl_sharing = match as_str(key, value)? {
                    "shared" => GclSharing::Shared,
                    "per_layer" => GclSharing::PerLayer,
                    other => return Err(bad(key, format!("expected shared or per_layer, got {other}"))),
                }
            }
            "g_hidden" => self.g_hidden = Some(as_usize(key, value)?),
            "rsm_rate" => self.rsm_rate = as_f64(key, value)?,
            "rsm_span" => self.rsm_span = as_usize(key, value)?,
            "cutoff_rate" => self.cutoff_rate = as_f64(key, value)?,
            "sidecar" => self.sidecar = Some(PathBuf::from(as_str(key, value)?)),
            "view1" => self.view1 = parse_ops(key, as_str(key, value)?)?,
            "view2" => self.view2 = parse_ops(key, as_str(key, value)?)?,
            "ridge" => self.ridge = as_f64(key, value)?,
            "bins" => self.bins = as_usize(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Command-line override: the raw string is coerced to an integer, then a
    /// float, then kept as a string, matching what TOML would have produced.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let value = if let Ok(i) = raw.parse::<i64>() {
            toml::Value::Integer(i)
        } else if let Ok(f) = raw.parse::<f64>() {
            toml::Value::Float(f)
        } else {
            toml::Value::String(raw.to_string())
        };
        self.set(key, &value)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.layers == 0 {
            return Err(bad("layers", "must be at least 1"));
        }
        if self.dim == 0 || self.dim % self.layers != 0 {
            return Err(bad(
                "dim",
                format!("{} must be a positive multiple of layers {}", self.dim, self.layers),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(bad(
                "heads",
                format!("{} must divide dim {}", self.heads, self.dim),
            ));
        }
        if self.ff_mult == 0 {
            return Err(bad("ff_mult", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(bad("dropout_p", format!("{} outside [0,1)", self.dropout_p)));
        }
        if self.max_len == 0 {
            return Err(bad("max_len", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return Err(bad("lr_peak", format!("{} must be positive", self.lr_peak)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", format!("{} must be non-negative", self.weight_decay)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(bad("tau", format!("{} must be positive", self.tau)));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(bad("lambda1", format!("{} must be non-negative", self.lambda1)));
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(bad("margin", format!("{} outside (0,1]", self.margin)));
        }
        if let Some(g) = self.g_hidden {
            if g == 0 {
                return Err(bad("g_hidden", "must be at least 1"));
            }
        }
        for (key, rate) in [("rsm_rate", self.rsm_rate), ("cutoff_rate", self.cutoff_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(bad(key, format!("{rate} outside [0,1]")));
            }
        }
        if self.rsm_span == 0 {
            return Err(bad("rsm_span", "must be at least 1"));
        }
        if !(self.ridge.is_finite() && self.ridge > 0.0) {
            return Err(bad("ridge", format!("{} must be positive", self.ridge)));
        }
        if self.bins < 2 {
            return Err(bad("bins", "must be at least 2"));
        }
        Ok(())
    }

    /// Seed precedence: explicit value (flag or file) > `LACL_SEED` > default.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64, ConfigError> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var("LACL_SEED") {
                Ok(raw) => raw
                    .parse::<u64>()
                    .map_err(|_| bad("LACL_SEED", format!("{raw} is not an unsigned integer")))?,
                Err(_) => TrainConfig::default().seed,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ff_mult: self.ff_mult,
            dropout_p: self.dropout_p,
            max_len: self.max_len,
            vocab_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_peak: self.lr_peak,
            weight_decay: self.weight_decay,
            tau: self.tau,
            lambda1: self.lambda1,
            margin: self.margin,
            seed: self.seed.unwrap_or(TrainConfig::default().seed),
            mode: self.mode,
            variant: self.variant,
            gcl_sharing: self.gcl_sharing,
            g_hidden: self.g_hidden,
        }
    }

    pub fn augment_policy(&self, sidecar: Option<Sidecar>) -> AugmentPolicy {
        AugmentPolicy {
            rsm_rate: self.rsm_rate,
            rsm_span: self.rsm_span,
            cutoff_rate: self.cutoff_rate,
            sidecar,
            view1: self.view1.clone(),
            view2: self.view2.clone(),
        }
    }

    fn ops_str(ops: &[AugmentOp]) -> String {
        ops.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(",")
    }

    /// Full resolved snapshot, alphabetical, for manifests and reports.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("layers".into(), self.layers.to_string());
        m.insert("dim".into(), self.dim.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("ff_mult".into(), self.ff_mult.to_string());
        m.insert("dropout_p".into(), self.dropout_p.to_string());
        m.insert("max_len".into(), self.max_len.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("lr_peak".into(), self.lr_peak.to_string());
        m.insert("weight_decay".into(), self.weight_decay.to_string());
        m.insert("tau".into(), self.tau.to_string());
        m.insert("lambda1".into(), self.lambda1.to_string());
        m.insert("margin".into(), self.margin.to_string());
        m.insert(
            "seed".into(),
            self.seed.map(|s| s.to_string()).unwrap_or_else(|| "unset".into()),
        );
        m.insert("mode".into(), self.mode.to_string());
        m.insert("variant".into(), self.variant.to_string());
        m.insert(
            "gcl_sharing".into(),
            match self.gcl_sharing {
                GclSharing::Shared => "shared".into(),
                GclSharing::PerLayer => "per_layer".into(),
            },
        );
        m.insert(
            "g_hidden".into(),
            self.g_hidden.map(|g| g.to_string()).unwrap_or_else(|| "auto".into()),
        );
        m.insert("rsm_rate".into(), self.rsm_rate.to_string());
        m.insert("rsm_span".into(), self.rsm_span.to_string());
        m.insert("cutoff_rate".into(), self.cutoff_rate.to_string());
        m.insert(
            "sidecar".into(),
            self.sidecar
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        );
        m.insert("view1".into(), Self::ops_str(&self.view1));
        m.insert("view2".into(), Self::ops_str(&self.view2));
        m.insert("ridge".into(), self.ridge.to_string());
        m.insert("bins".into(), self.bins.to_string());
        m
    }
}
