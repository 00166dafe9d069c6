//! Gaussian-blur distortion model and dataset expansion.
//!
//! The distortion level `q` is the blur standard deviation in pixels. Each
//! base image is replicated with several `q` values drawn from `[q_lo, q_hi]`.
//!
//! Augmented datasets persist as a flat binary file:
//!
//! ```text
//! DAAUG v1 count=<n> scheme=<grid|random> seed=<u64>\n
//! n records of: label u8 | q f64 LE | 784 x pixel f32 LE (row-major, in [0,1])
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::idx::{BaseDataset, IMAGE_PIXELS, IMAGE_SIDE};

pub const AUGMENTED_MAGIC: &str = "DAAUG v1";
const RECORD_BYTES: usize = 1 + 8 + 4 * IMAGE_PIXELS;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("blur sigma must be a finite value >= 0, got {0}")]
    NegativeSigma(f64),
    #[error("image has {0} pixels, expected 784")]
    BadImageSize(usize),
    #[error("invalid expansion: {0}")]
    InvalidExpansion(String),
    #[error("no samples with q >= {q_min}")]
    EmptyResult { q_min: f64 },
    #[error("unknown expansion scheme {0:?} (expected grid or random)")]
    UnknownScheme(String),
    #[error("malformed augmented dataset header: {0}")]
    BadHeader(String),
    #[error("augmented dataset truncated: header declares {declared} samples, file holds {found}")]
    Truncated { declared: usize, found: usize },
    #[error("sample {index} in augmented file is invalid: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Normalized, truncated 1-D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub sigma: f64,
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl BlurKernel {
    /// Weight at signed offset `t` from the center (zero outside the support).
    pub fn weight(&self, t: isize) -> f64 {
        let r = self.radius as isize;
        if t.abs() > r {
            0.0
        } else {
            self.weights[(t + r) as usize]
        }
    }
}

/// Kernel truncated at `ceil(3 sigma)` taps on each side and renormalized.
pub fn gaussian_kernel(sigma: f64) -> Result<BlurKernel, AugmentError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(AugmentError::NegativeSigma(sigma));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return Ok(BlurKernel {
            sigma,
            radius: 0,
            weights: vec![1.0],
        });
    }
    let denom = 2.0 * sigma * sigma;
    let r = radius as isize;
    let mut weights: Vec<f64> = (-r..=r)
        .map(|t| (-((t * t) as f64) / denom).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(BlurKernel {
        sigma,
        radius,
        weights,
    })
}

fn convolve_rows(src: &[f64], dst: &mut [f64], kernel: &BlurKernel) {
    let r = kernel.radius as isize;
    let n = IMAGE_SIDE as isize;
    for y in 0..IMAGE_SIDE {
        let row = &src[y * IMAGE_SIDE..(y + 1) * IMAGE_SIDE];
        for x in 0..n {
            let lo = (x - r).max(0);
            let hi = (x + r).min(n - 1);
            let mut acc = 0.0;
            for sx in lo..=hi {
                acc += kernel.weights[(sx - x + r) as usize] * row[sx as usize];
            }
            dst[y * IMAGE_SIDE + x as usize] = acc;
        }
    }
}

fn convolve_cols(src: &[f64], dst: &mut [f64], kernel: &BlurKernel) {
    let r = kernel.radius as isize;
    let n = IMAGE_SIDE as isize;
    for y in 0..n {
        let lo = (y - r).max(0);
        let hi = (y + r).min(n - 1);
        let out = &mut dst[y as usize * IMAGE_SIDE..(y as usize + 1) * IMAGE_SIDE];
        out.fill(0.0);
        for sy in lo..=hi {
            let w = kernel.weights[(sy - y + r) as usize];
            let row = &src[sy as usize * IMAGE_SIDE..(sy as usize + 1) * IMAGE_SIDE];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
}

/// Separable Gaussian blur with zero padding; output clamped to `[0, 1]`.
pub fn blur(pixels: &[f64], q: f64) -> Result<Vec<f64>, AugmentError> {
    let kernel = gaussian_kernel(q)?;
    blur_with(pixels, &kernel)
}

pub fn blur_with(pixels: &[f64], kernel: &BlurKernel) -> Result<Vec<f64>, AugmentError> {
    if pixels.len() != IMAGE_PIXELS {
        return Err(AugmentError::BadImageSize(pixels.len()));
    }
    if kernel.radius == 0 {
        return Ok(pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect());
    }
    let mut tmp = vec![0.0; IMAGE_PIXELS];
    let mut out = vec![0.0; IMAGE_PIXELS];
    convolve_rows(pixels, &mut tmp, kernel);
    convolve_cols(&tmp, &mut out, kernel);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Evenly spaced q values including both endpoints.
    Grid,
    /// q drawn i.i.d. uniform from the seeded generator.
    Random,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Grid => "grid",
            Scheme::Random => "random",
        })
    }
}

impl FromStr for Scheme {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "grid" => Ok(Scheme::Grid),
            "random" => Ok(Scheme::Random),
            other => Err(AugmentError::UnknownScheme(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortedSample {
    pub pixels: Box<[f32; IMAGE_PIXELS]>,
    pub label: u8,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub samples: Vec<DistortedSample>,
    pub seed: u64,
    pub scheme: Scheme,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ExpandConfig {
    pub replicas: usize,
    pub q_lo: f64,
    pub q_hi: f64,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            replicas: 10,
            q_lo: 0.0,
            q_hi: 4.0,
            scheme: Scheme::Grid,
            seed: 0,
        }
    }
}

/// The q values a GRID expansion assigns to every image.
pub fn grid_levels(replicas: usize, q_lo: f64, q_hi: f64) -> Vec<f64> {
    if replicas == 1 {
        return vec![q_lo];
    }
    let step = (q_hi - q_lo) / (replicas - 1) as f64;
    (0..replicas)
        .map(|j| {
            if j == replicas - 1 {
                q_hi
            } else {
                q_lo + j as f64 * step
            }
        })
        .collect()
}

/// Emits `replicas` blurred copies per base image, ordered image-major.
pub fn expand_dataset(
    base: &BaseDataset,
    cfg: &ExpandConfig,
) -> Result<AugmentedDataset, AugmentError> {
    if cfg.replicas == 0 {
        return Err(AugmentError::InvalidExpansion(
            "replicas must be >= 1".into(),
        ));
    }
    if !cfg.q_lo.is_finite() || !cfg.q_hi.is_finite() || cfg.q_lo < 0.0 || cfg.q_lo >= cfg.q_hi {
        return Err(AugmentError::InvalidExpansion(format!(
            "need 0 <= q_lo < q_hi, got [{}, {}]",
            cfg.q_lo, cfg.q_hi
        )));
    }
    let grid = grid_levels(cfg.replicas, cfg.q_lo, cfg.q_hi);
    let grid_kernels = match cfg.scheme {
        Scheme::Grid => grid
            .iter()
            .map(|&q| gaussian_kernel(q))
            .collect::<Result<Vec<_>, _>>()?,
        Scheme::Random => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(base.len() * cfg.replicas);
    let mut unit = vec![0.0f64; IMAGE_PIXELS];
    for img in &base.samples {
        for (u, &p) in unit.iter_mut().zip(img.pixels.iter()) {
            *u = f64::from(p) / 255.0;
        }
        for j in 0..cfg.replicas {
            let (q, blurred) = match cfg.scheme {
                Scheme::Grid => (grid[j], blur_with(&unit, &grid_kernels[j])?),
                Scheme::Random => {
                    let q = rng.gen_range(cfg.q_lo..=cfg.q_hi);
                    (q, blur(&unit, q)?)
                }
            };
            let mut pixels = Box::new([0f32; IMAGE_PIXELS]);
            for (dst, v) in pixels.iter_mut().zip(blurred) {
                *dst = v as f32;
            }
            samples.push(DistortedSample {
                pixels,
                label: img.label,
                q,
            });
        }
    }
    Ok(AugmentedDataset {
        samples,
        seed: cfg.seed,
        scheme: cfg.scheme,
    })
}

/// Keeps samples with `q >= q_min`, preserving order.
pub fn filter_min_q(
    dataset: AugmentedDataset,
    q_min: f64,
) -> Result<AugmentedDataset, AugmentError> {
    let AugmentedDataset {
        samples,
        seed,
        scheme,
    } = dataset;
    let samples: Vec<_> = samples.into_iter().filter(|s| s.q >= q_min).collect();
    if samples.is_empty() {
        return Err(AugmentError::EmptyResult { q_min });
    }
    Ok(AugmentedDataset {
        samples,
        seed,
        scheme,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AugmentError + '_ {
    move |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_augmented(
    dataset: &AugmentedDataset,
    path: impl AsRef<Path>,
) -> Result<(), AugmentError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = format!(
        "{AUGMENTED_MAGIC} count={} scheme={} seed={}\n",
        dataset.len(),
        dataset.scheme,
        dataset.seed
    );
    let mut buf = Vec::with_capacity(RECORD_BYTES);
    w.write_all(header.as_bytes()).map_err(io_err(path))?;
    for s in &dataset.samples {
        buf.clear();
        buf.push(s.label);
        buf.extend_from_slice(&s.q.to_le_bytes());
        for p in s.pixels.iter() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_header(line: &str) -> Result<(usize, Scheme, u64), AugmentError> {
    let rest = line
        .strip_prefix(AUGMENTED_MAGIC)
        .ok_or_else(|| AugmentError::BadHeader(format!("expected {AUGMENTED_MAGIC:?} prefix")))?;
    let (mut count, mut scheme, mut seed) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| AugmentError::BadHeader(format!("field {field:?}")))?;
        let bad = || AugmentError::BadHeader(format!("value {value:?} for {key}"));
        match key {
            "count" => count = Some(value.parse().map_err(|_| bad())?),
            "scheme" => scheme = Some(value.parse()?),
            "seed" => seed = Some(value.parse().map_err(|_| bad())?),
            _ => return Err(AugmentError::BadHeader(format!("unknown key {key:?}"))),
        }
    }
    match (count, scheme, seed) {
        (Some(c), Some(s), Some(d)) => Ok((c, s, d)),
        _ => Err(AugmentError::BadHeader(
            "missing count, scheme or seed".into(),
        )),
    }
}

pub fn read_augmented(path: impl AsRef<Path>) -> Result<AugmentedDataset, AugmentError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(io_err(path))? == 0 {
            return Err(AugmentError::BadHeader("missing header line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 256 {
            return Err(AugmentError::BadHeader("header line too long".into()));
        }
    }
    let header =
        String::from_utf8(header).map_err(|_| AugmentError::BadHeader("not utf-8".into()))?;
    let (count, scheme, seed) = parse_header(&header)?;

    let mut samples = Vec::with_capacity(count);
    let mut record = vec![0u8; RECORD_BYTES];
    for index in 0..count {
        if let Err(e) = r.read_exact(&mut record) {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                return Err(AugmentError::Truncated {
                    declared: count,
                    found: index,
                });
            }
            return Err(io_err(path)(e));
        }
        let label = record[0];
        let q = f64::from_le_bytes(record[1..9].try_into().unwrap());
        if label >= crate::idx::NUM_DIGITS || !q.is_finite() || q < 0.0 {
            return Err(AugmentError::BadRecord {
                index,
                reason: format!("label {label}, q {q}"),
            });
        }
        let mut pixels = Box::new([0f32; IMAGE_PIXELS]);
        for (p, chunk) in pixels.iter_mut().zip(record[9..].chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        samples.push(DistortedSample { pixels, label, q });
    }
    Ok(AugmentedDataset {
        samples,
        seed,
        scheme,
    })
}
