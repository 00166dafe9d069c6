//! IDX reader/writer for the MNIST digit files.
//!
//! ```text
//! images: magic 0x00000803 | count u32 BE | rows u32 BE | cols u32 BE | count*rows*cols u8
//! labels: magic 0x00000801 | count u32 BE | count u8
//! ```
//!
//! Only 28x28 images are accepted; the network input is fixed to that size.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_DIGITS: u8 = 10;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("image dimensions {rows}x{cols} not supported (expected 28x28)")]
    DimensionMismatch { rows: usize, cols: usize },
    #[error("label {label} at index {index} is outside 0..=9")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Pixels = [u8; IMAGE_PIXELS];

/// One 28x28 grayscale digit and its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub pixels: Box<Pixels>,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct BaseDataset {
    pub samples: Vec<LabeledImage>,
    pub source: String,
}

impl BaseDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps only the first `n` samples (no-op when `n >= len`).
    pub fn truncate(mut self, n: usize) -> Self {
        if n < self.samples.len() {
            self.samples.truncate(n);
            self.source = format!("{} [first {n}]", self.source);
        }
        self
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
        .ok_or(IdxError::Truncated {
            expected: offset + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Pixels>, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(IdxError::DimensionMismatch { rows, cols });
    }
    let payload = &bytes[16..];
    let expected = count * IMAGE_PIXELS;
    if payload.len() < expected {
        return Err(IdxError::Truncated {
            expected: 16 + expected,
            actual: bytes.len(),
        });
    }
    Ok(payload[..expected]
        .chunks_exact(IMAGE_PIXELS)
        .map(|chunk| {
            let mut px = [0u8; IMAGE_PIXELS];
            px.copy_from_slice(chunk);
            px
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(IdxError::Truncated {
            expected: 8 + count,
            actual: bytes.len(),
        });
    }
    let labels = payload[..count].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_DIGITS) {
        return Err(IdxError::LabelOutOfRange { index, label });
    }
    Ok(labels)
}

pub fn encode_idx_images(images: &[Pixels]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * IMAGE_PIXELS);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Pairs image `i` with label `i` from two IDX files.
pub fn load_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<BaseDataset, IdxError> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| LabeledImage {
            pixels: Box::new(pixels),
            label,
        })
        .collect();
    Ok(BaseDataset {
        samples,
        source: format!("{} + {}", images_path.display(), labels_path.display()),
    })
}
