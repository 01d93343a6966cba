//! IDX container files (the MNIST distribution format), plain or gzipped.
//!
//! All header integers are big-endian `u32`. Image files use magic
//! `0x00000803` followed by `(count, rows, cols)`; label files use
//! `0x00000801` followed by `(count)`. Payloads are unsigned bytes.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use super::{IdentityDataset, Sample, SplitTag};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("wrong magic for {kind}: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic {
        kind: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {kind} file: expected {expected} bytes, found {found}")]
    Truncated {
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("io error reading {kind} file: {source}")]
    Io {
        kind: &'static str,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, row-major per image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels
            .len()
            .checked_div(self.rows * self.cols)
            .unwrap_or(0)
    }
}

fn read_all(path: &Path, kind: &'static str) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io { kind, source };
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], at: usize, kind: &'static str) -> Result<u32, IdxError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            kind,
            expected: at + 4,
            found: buf.len(),
        })
}

pub fn parse_images(buf: &[u8]) -> Result<IdxImages, IdxError> {
    const KIND: &str = "images";
    let magic = be_u32(buf, 0, KIND)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::WrongMagic {
            kind: KIND,
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(buf, 4, KIND)? as usize;
    let rows = be_u32(buf, 8, KIND)? as usize;
    let cols = be_u32(buf, 12, KIND)? as usize;
    let expected = 16 + count * rows * cols;
    if buf.len() < expected {
        return Err(IdxError::Truncated {
            kind: KIND,
            expected,
            found: buf.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: buf[16..expected].to_vec(),
    })
}

pub fn parse_labels(buf: &[u8]) -> Result<Vec<u8>, IdxError> {
    const KIND: &str = "labels";
    let magic = be_u32(buf, 0, KIND)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::WrongMagic {
            kind: KIND,
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(buf, 4, KIND)? as usize;
    if buf.len() < 8 + count {
        return Err(IdxError::Truncated {
            kind: KIND,
            expected: 8 + count,
            found: buf.len(),
        });
    }
    Ok(buf[8..8 + count].to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages, IdxError> {
    parse_images(&read_all(path, "images")?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    parse_labels(&read_all(path, "labels")?)
}

/// Load an image/label IDX pair as a single-channel dataset with pixels
/// scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<IdentityDataset, IdxError> {
    let imgs = read_images(images)?;
    let labs = read_labels(labels)?;
    if imgs.count() != labs.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.count(),
            labels: labs.len(),
        });
    }
    let plane = imgs.rows * imgs.cols;
    let samples = labs
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let data = imgs.pixels[i * plane..(i + 1) * plane]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect();
            Sample {
                image: Tensor::new(vec![1, imgs.rows, imgs.cols], data).expect("plane size"),
                identity: i64::from(label),
                camera: None,
            }
        })
        .collect();
    Ok(IdentityDataset::new(samples, SplitTag::Train).expect("uniform image shape"))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let file = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
    }
    Ok(())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGE_MAGIC,
        images.count() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Write a single-channel dataset whose identities fit in a byte. Pixels are
/// quantized to `round(255 * v)` after clamping to `[0, 1]`; datasets loaded
/// with [`load_idx`] therefore round-trip exactly.
pub fn write_idx(dataset: &IdentityDataset, images: &Path, labels: &Path) -> crate::Result<()> {
    let (rows, cols) = match dataset.image_shape() {
        Some([1, h, w]) => (*h, *w),
        Some(other) => {
            return Err(crate::Error::Data(format!(
                "IDX stores single-channel images, dataset has shape {other:?}"
            )))
        }
        None => (0, 0),
    };
    let mut pixels = Vec::with_capacity(dataset.len() * rows * cols);
    let mut labs = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let label = u8::try_from(s.identity).map_err(|_| {
            crate::Error::Data(format!("identity {} does not fit in a byte", s.identity))
        })?;
        labs.push(label);
        pixels.extend(
            s.image
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    write_bytes(images, &encode_images(&IdxImages { rows, cols, pixels }))?;
    write_bytes(labels, &encode_labels(&labs))?;
    Ok(())
}
