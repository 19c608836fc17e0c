//! Reader for the IDX files used by MNIST-style datasets.

use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use kronprior::data::Dataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} does not fit the class count")]
    BadLabel(u8),
    #[error("cannot read {path}: {detail}")]
    Io { path: String, detail: String },
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    let s = bytes.get(at..at + 4).ok_or(IdxError::Truncated {
        needed: at + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { found, expected });
    }
    Ok(())
}

/// Label bytes from an IDX1 file.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let body = bytes.get(8..8 + n).ok_or(IdxError::Truncated {
        needed: 8 + n,
        have: bytes.len(),
    })?;
    Ok(body.to_vec())
}

/// Images from an IDX3 file as a row-per-image matrix scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<DMatrix<f64>, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let needed = 16 + n * d;
    let body = bytes.get(16..needed).ok_or(IdxError::Truncated {
        needed,
        have: bytes.len(),
    })?;
    Ok(DMatrix::from_row_iterator(n, d, body.iter().map(|&b| b as f64 / 255.0)))
}

/// Encodes labels as IDX1 (used for fixtures).
pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABEL_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

/// Encodes `n` images of `rows × cols` bytes as IDX3.
pub fn encode_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = IMAGE_MAGIC.to_be_bytes().to_vec();
    for v in [n, rows, cols] {
        out.extend((v as u32).to_be_bytes());
    }
    out.extend(pixels);
    out
}

/// Builds a dataset from image and label bytes; the class count is
/// `max label + 1`.
pub fn dataset_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset, IdxError> {
    let x = parse_images(images)?;
    let y = parse_labels(labels)?;
    if x.nrows() != y.len() {
        return Err(IdxError::CountMismatch {
            images: x.nrows(),
            labels: y.len(),
        });
    }
    let classes = y.iter().copied().max().map_or(1, |m| m as usize + 1);
    let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    Dataset::new(x, labels, classes).map_err(|_| IdxError::BadLabel(y.iter().copied().max().unwrap_or(0)))
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|e| IdxError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    dataset_from_bytes(&read(images)?, &read(labels)?)
}
