//! IDX container: big-endian magic `0x0000_08NN` (u8 payload, NN dims), one
//! u32 per dimension, then the raw bytes.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, IdxError, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        })
}

/// Returns `(dims, payload)` after checking the magic and payload length.
fn parse_header(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8]), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(IdxError::BadMagic {
            offset: 0,
            expected: magic,
            found,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let payload = bytes.get(start..start + len).ok_or(IdxError::Truncated {
        offset: start,
        needed: len,
        available: bytes.len() - start,
    })?;
    Ok((dims, payload))
}

/// Parses in-memory IDX image (3-d) and label (1-d) files.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (dims, pixels) = parse_header(images, IMAGES_MAGIC)?;
    let (ldims, lbytes) = parse_header(labels, LABELS_MAGIC)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n != ldims[0] {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: ldims[0],
        }
        .into());
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("empty IDX image set {n}×{h}×{w}")));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect::<Vec<_>>();
    let labels: Vec<usize> = lbytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(&[n, 1, h, w], data)?, labels, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

pub fn encode_idx_images(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), n * h * w);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes an image/label IDX pair.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    pixels: &[u8],
    labels: &[u8],
    h: usize,
    w: usize,
) -> Result<()> {
    let n = labels.len();
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, encode_idx_images(pixels, n, h, w)).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, encode_idx_labels(labels)).map_err(|e| Error::io(lp, e))?;
    Ok(())
}
