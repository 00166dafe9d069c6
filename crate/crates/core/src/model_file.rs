//! `DACNN v1` model files.
//!
//! ```text
//! DACNN v1
//! key=value lines      (mode, classes, input, training and head configuration)
//! layer=<spec>         (one per layer, in order)
//! history=<epoch> <loss> <accuracy>
//! params=<n>
//! <n little-endian f32 values: for each parameterized layer, weights then bias>
//! ```
//!
//! Parameters are written as 4-byte floats. Models returned by training are
//! already rounded to that precision, so saving and loading them is exact.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nn::{LayerSpec, NetworkModel, NnError};
use crate::rbf::RbfConfig;
use crate::train::{EpochStats, TrainConfig, TrainMode, TrainedModel};

pub const MODEL_MAGIC: &str = "DACNN v1";

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("not a model file (missing {MODEL_MAGIC:?} magic line)")]
    BadMagic,
    #[error("unsupported model file version {0:?}")]
    VersionMismatch(String),
    #[error("model payload truncated: need {expected} floats, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode_model(trained: &TrainedModel) -> Vec<u8> {
    let m = &trained.model;
    let t = &trained.train_config;
    let r = &trained.rbf_config;
    let [c, h, w] = m.input_shape();
    let mut text = format!("{MODEL_MAGIC}\n");
    let mut kv = |k: &str, v: String| {
        text.push_str(k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    };
    kv("mode", trained.mode_trained.to_string());
    kv("classes", m.num_classes().to_string());
    kv("input", format!("{c} {h} {w}"));
    kv("epochs", t.epochs.to_string());
    kv("batch_size", t.batch_size.to_string());
    kv("learning_rate", t.learning_rate.to_string());
    kv("momentum", t.momentum.to_string());
    kv("seed", t.seed.to_string());
    kv("shuffle", t.shuffle.to_string());
    kv("p_max", r.p_max.to_string());
    kv("p_min", r.p_min.to_string());
    kv("q_lo", r.a.to_string());
    kv("q_hi", r.b.to_string());
    kv("peak", r.peak.to_string());
    kv("sigma_rbf", r.sigma_rbf.to_string());
    kv("rbf_classes", r.num_classes.to_string());
    for layer in m.layers() {
        kv("layer", layer.to_string());
    }
    for h in &trained.history {
        kv("history", format!("{} {} {}", h.epoch, h.loss, h.accuracy));
    }
    kv("params", m.parameter_count().to_string());

    let mut bytes = text.into_bytes();
    for s in m.param_slices() {
        for &v in s {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn malformed(msg: impl Into<String>) -> ModelFileError {
    ModelFileError::Malformed(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ModelFileError> {
    v.trim()
        .parse()
        .map_err(|_| malformed(format!("bad value {v:?} for {key}")))
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel, ModelFileError> {
    let mut pos = 0usize;
    let mut next_line = || -> Option<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).ok()
    };

    let magic = next_line().ok_or(ModelFileError::BadMagic)?;
    if magic != MODEL_MAGIC {
        return Err(match magic.strip_prefix("DACNN ") {
            Some(v) if v.starts_with('v') => ModelFileError::VersionMismatch(v.to_string()),
            _ => ModelFileError::BadMagic,
        });
    }

    let mut train = TrainConfig::default();
    let mut rbf = RbfConfig::default();
    let mut mode = None;
    let mut classes = None;
    let mut input = None;
    let mut layers = Vec::new();
    let mut history = Vec::new();
    let n_params: usize = loop {
        let line = next_line().ok_or_else(|| malformed("header ended before params line"))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("expected key=value, got {line:?}")))?;
        match key {
            "mode" => mode = Some(value.parse::<TrainMode>().map_err(malformed)?),
            "classes" => classes = Some(parse_num::<usize>(key, value)?),
            "input" => {
                let dims: Vec<usize> = value
                    .split_whitespace()
                    .map(|d| parse_num(key, d))
                    .collect::<Result<_, _>>()?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| malformed("input needs 3 dims"))?;
                input = Some(dims);
            }
            "epochs" => train.epochs = parse_num(key, value)?,
            "batch_size" => train.batch_size = parse_num(key, value)?,
            "learning_rate" => train.learning_rate = parse_num(key, value)?,
            "momentum" => train.momentum = parse_num(key, value)?,
            "seed" => train.seed = parse_num(key, value)?,
            "shuffle" => train.shuffle = parse_num(key, value)?,
            "p_max" => rbf.p_max = parse_num(key, value)?,
            "p_min" => rbf.p_min = parse_num(key, value)?,
            "q_lo" => rbf.a = parse_num(key, value)?,
            "q_hi" => rbf.b = parse_num(key, value)?,
            "peak" => rbf.peak = parse_num(key, value)?,
            "sigma_rbf" => rbf.sigma_rbf = parse_num(key, value)?,
            "rbf_classes" => rbf.num_classes = parse_num(key, value)?,
            "layer" => layers.push(value.parse::<LayerSpec>().map_err(malformed)?),
            "history" => {
                let f: Vec<&str> = value.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(malformed(format!("bad history line {value:?}")));
                }
                history.push(EpochStats {
                    epoch: parse_num(key, f[0])?,
                    loss: parse_num(key, f[1])?,
                    accuracy: parse_num(key, f[2])?,
                });
            }
            "params" => break parse_num(key, value)?,
            other => return Err(malformed(format!("unknown key {other:?}"))),
        }
    };

    let mode = mode.ok_or_else(|| malformed("missing mode"))?;
    train.mode = mode;
    let classes = classes.ok_or_else(|| malformed("missing classes"))?;
    let input = input.ok_or_else(|| malformed("missing input"))?;
    let mut model = NetworkModel::new(input, layers, classes)?;
    if model.parameter_count() != n_params {
        return Err(malformed(format!(
            "header declares {n_params} parameters, layers need {}",
            model.parameter_count()
        )));
    }
    let payload = &bytes[pos..];
    let found = payload.len() / 4;
    if found < n_params {
        return Err(ModelFileError::Truncated {
            expected: n_params,
            found,
        });
    }
    if payload.len() != n_params * 4 {
        return Err(malformed("trailing bytes after parameter payload"));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    for s in model.param_slices_mut() {
        for v in s.iter_mut() {
            *v = floats.next().expect("length checked");
        }
    }
    Ok(TrainedModel {
        model,
        mode_trained: mode,
        history,
        train_config: train,
        rbf_config: rbf,
    })
}

pub fn save_model(trained: &TrainedModel, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    let path = path.as_ref();
    fs::write(path, encode_model(trained)).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel, ModelFileError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}
