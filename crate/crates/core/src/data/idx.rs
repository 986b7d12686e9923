//! IDX binary files as distributed for MNIST (big-endian header).
//!
//! Images: magic `0x00000803`, then count, rows, cols, then one unsigned byte
//! per pixel. Labels: magic `0x00000801`, then count, then one byte per
//! label. Gzipped files are detected by their magic bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::{Error, Result, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    bytes
        .get(header..header + n)
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: header + n,
            found: bytes.len(),
        })
}

/// Reads an image file into an `[n, 1, rows, cols]` tensor scaled by 1/255.
pub fn read_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = payload(&bytes, 16, n * rows * cols, path)?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, n, path)?
        .iter()
        .map(|&b| usize::from(b))
        .collect())
}

/// Loads an image/label file pair. The class count is one more than the
/// largest label present.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(images, labels, n_classes)
}

/// Writes `[n, 1, rows, cols]` (or `[n, rows, cols]`) images as an
/// uncompressed IDX file, rounding pixels to the nearest byte.
pub fn write_images(images: &Tensor, mut w: impl Write) -> Result<()> {
    let (rows, cols) = match *images.item_shape() {
        [1, r, c] | [r, c] => (r, c),
        _ => {
            return Err(Error::Shape(format!(
                "cannot write item shape {:?} as IDX images",
                images.item_shape()
            )))
        }
    };
    for v in [IMAGES_MAGIC, images.rows() as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_labels(labels: &[usize], mut w: impl Write) -> Result<()> {
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}
