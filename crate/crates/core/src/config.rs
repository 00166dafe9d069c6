//! Run configuration: line-oriented `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must belong
//! to the fixed schema below; command-line overrides are applied through the
//! same [`RunConfig::set`] path after the file, so flags win over the file and
//! the file wins over defaults.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::augment::{ExpandConfig, Scheme};
use crate::eval::{ErrorFreeBase, MetricOptions, Population};
use crate::rbf::RbfConfig;
use crate::train::{TrainConfig, TrainMode};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "images",
    "labels",
    "data",
    "model",
    "field",
    "out",
    "tag",
    "limit",
    "replicas",
    "q_lo",
    "q_hi",
    "scheme",
    "seed",
    "p_max",
    "p_min",
    "peak",
    "sigma_rbf",
    "classes",
    "mode",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "shuffle",
    "q_min",
    "tau",
    "bin_width",
    "breakpoints",
    "error_free_denominator",
    "population",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Augmented dataset file consumed by `train` and `eval`.
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Correlation-field CSV consumed by `regress`.
    pub field: Option<PathBuf>,
    pub out: PathBuf,
    pub tag: String,
    /// Use only the first `limit` base images; 0 keeps all.
    pub limit: usize,
    pub replicas: usize,
    /// Distortion range shared by augmentation and the head's interpolation.
    pub q_lo: f64,
    pub q_hi: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub p_max: f64,
    pub p_min: f64,
    pub peak: f64,
    pub sigma_rbf: f64,
    pub classes: usize,
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub shuffle: bool,
    /// Training-split filter threshold.
    pub q_min: f64,
    pub tau: f64,
    pub bin_width: f64,
    pub breakpoints: Vec<f64>,
    pub error_free_denominator: ErrorFreeBase,
    pub population: Population,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rbf = RbfConfig::default();
        let train = TrainConfig::default();
        let expand = ExpandConfig::default();
        Self {
            images: None,
            labels: None,
            data: None,
            model: None,
            field: None,
            out: PathBuf::from("."),
            tag: "run".to_string(),
            limit: 0,
            replicas: expand.replicas,
            q_lo: expand.q_lo,
            q_hi: expand.q_hi,
            scheme: expand.scheme,
            seed: expand.seed,
            p_max: rbf.p_max,
            p_min: rbf.p_min,
            peak: rbf.peak,
            sigma_rbf: rbf.sigma_rbf,
            classes: rbf.num_classes,
            mode: train.mode,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            shuffle: train.shuffle,
            q_min: 0.5,
            tau: 0.5,
            bin_width: 0.25,
            breakpoints: crate::quantile::default_breakpoints(),
            error_free_denominator: ErrorFreeBase::AllRecords,
            population: Population::All,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "images" => self.images = parse_path(value),
            "labels" => self.labels = parse_path(value),
            "data" => self.data = parse_path(value),
            "model" => self.model = parse_path(value),
            "field" => self.field = parse_path(value),
            "out" => self.out = PathBuf::from(value),
            "tag" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(ConfigError::BadValue {
                        key: "tag".into(),
                        value: value.into(),
                        reason: "must be a non-empty file-name stem".into(),
                    });
                }
                self.tag = value.to_string();
            }
            "limit" => self.limit = parse("limit", value)?,
            "replicas" => self.replicas = parse("replicas", value)?,
            "q_lo" => self.q_lo = parse("q_lo", value)?,
            "q_hi" => self.q_hi = parse("q_hi", value)?,
            "scheme" => self.scheme = parse("scheme", value)?,
            "seed" => self.seed = parse("seed", value)?,
            "p_max" => self.p_max = parse("p_max", value)?,
            "p_min" => self.p_min = parse("p_min", value)?,
            "peak" => self.peak = parse("peak", value)?,
            "sigma_rbf" => self.sigma_rbf = parse("sigma_rbf", value)?,
            "classes" => self.classes = parse("classes", value)?,
            "mode" => self.mode = parse("mode", value)?,
            "epochs" => self.epochs = parse("epochs", value)?,
            "batch_size" => self.batch_size = parse("batch_size", value)?,
            "learning_rate" => self.learning_rate = parse("learning_rate", value)?,
            "momentum" => self.momentum = parse("momentum", value)?,
            "shuffle" => self.shuffle = parse("shuffle", value)?,
            "q_min" => self.q_min = parse("q_min", value)?,
            "tau" => self.tau = parse("tau", value)?,
            "bin_width" => self.bin_width = parse("bin_width", value)?,
            "breakpoints" => {
                self.breakpoints = value
                    .split(',')
                    .map(|v| parse::<f64>("breakpoints", v.trim()))
                    .collect::<Result<_, _>>()?
            }
            "error_free_denominator" => {
                self.error_free_denominator = parse("error_free_denominator", value)?
            }
            "population" => self.population = parse("population", value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Text form of one key's current value; parses back to the same value.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "images" => path_text(&self.images),
            "labels" => path_text(&self.labels),
            "data" => path_text(&self.data),
            "model" => path_text(&self.model),
            "field" => path_text(&self.field),
            "out" => self.out.display().to_string(),
            "tag" => self.tag.clone(),
            "limit" => self.limit.to_string(),
            "replicas" => self.replicas.to_string(),
            "q_lo" => self.q_lo.to_string(),
            "q_hi" => self.q_hi.to_string(),
            "scheme" => self.scheme.to_string(),
            "seed" => self.seed.to_string(),
            "p_max" => self.p_max.to_string(),
            "p_min" => self.p_min.to_string(),
            "peak" => self.peak.to_string(),
            "sigma_rbf" => self.sigma_rbf.to_string(),
            "classes" => self.classes.to_string(),
            "mode" => self.mode.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "shuffle" => self.shuffle.to_string(),
            "q_min" => self.q_min.to_string(),
            "tau" => self.tau.to_string(),
            "bin_width" => self.bin_width.to_string(),
            "breakpoints" => self
                .breakpoints
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "error_free_denominator" => self.error_free_denominator.to_string(),
            "population" => self.population.to_string(),
            _ => return None,
        })
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("schema key"));
        }
        out
    }

    pub fn expand_config(&self) -> ExpandConfig {
        ExpandConfig {
            replicas: self.replicas,
            q_lo: self.q_lo,
            q_hi: self.q_hi,
            scheme: self.scheme,
            seed: self.seed,
        }
    }

    pub fn rbf_config(&self) -> Result<RbfConfig, ConfigError> {
        let cfg = RbfConfig {
            p_max: self.p_max,
            p_min: self.p_min,
            a: self.q_lo,
            b: self.q_hi,
            peak: self.peak,
            sigma_rbf: self.sigma_rbf,
            num_classes: self.classes,
        };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            mode: self.mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
            shuffle: self.shuffle,
        };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            error_free_base: self.error_free_denominator,
            population: self.population,
        }
    }

    /// `<out>/<tag><suffix>`.
    pub fn output_path(&self, suffix: &str) -> PathBuf {
        self.out.join(format!("{}{suffix}", self.tag))
    }
}
