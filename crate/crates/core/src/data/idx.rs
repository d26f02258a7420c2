//! IDX image and label files (big-endian; `0x00000803` images, `0x00000801` labels).

use std::fs;
use std::path::Path;

use super::{DatasetSplit, Image};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, format!("truncated {what}")))
}

fn check_magic(buf: &[u8], expected: u32, kind: &str) -> Result<()> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != expected {
        return Err(Error::format(
            0,
            format!("bad {kind} magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

/// Decodes an image file; pixels are scaled to `[0, 1]`.
pub fn decode_idx_images(buf: &[u8]) -> Result<Vec<Image>> {
    check_magic(buf, IMAGES_MAGIC, "image")?;
    let n = be_u32(buf, 4, "image count")? as usize;
    let h = be_u32(buf, 8, "row count")? as usize;
    let w = be_u32(buf, 12, "column count")? as usize;
    let per = h
        .checked_mul(w)
        .ok_or_else(|| Error::format(8, "image size overflows"))?;
    let need = n
        .checked_mul(per)
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::format(4, "payload size overflows"))?;
    if buf.len() < need {
        return Err(Error::format(
            buf.len() as u64,
            format!("truncated pixel data: {n} images of {h}x{w} need {need} bytes, file has {}", buf.len()),
        ));
    }
    if buf.len() > need {
        return Err(Error::format(need as u64, "trailing bytes after pixel data"));
    }
    (0..n)
        .map(|i| {
            let px = &buf[16 + i * per..16 + (i + 1) * per];
            Image::new(h, w, 1, px.iter().map(|&b| b as f64 / 255.0).collect())
        })
        .collect()
}

pub fn decode_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    check_magic(buf, LABELS_MAGIC, "label")?;
    let n = be_u32(buf, 4, "label count")? as usize;
    let need = n + 8;
    if buf.len() < need {
        return Err(Error::format(
            buf.len() as u64,
            format!("truncated labels: {n} labels need {need} bytes, file has {}", buf.len()),
        ));
    }
    if buf.len() > need {
        return Err(Error::format(need as u64, "trailing bytes after labels"));
    }
    Ok(buf[8..].iter().map(|&b| b as usize).collect())
}

/// Encodes single-channel images, quantizing pixels to `round(255 · p)` clamped to `0..=255`.
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), h, w] {
        let v = u32::try_from(v).map_err(|_| Error::usage("dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, 1) {
            return Err(Error::usage("IDX images must share one size and have a single channel"));
        }
        out.extend(img.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    let n = u32::try_from(labels.len()).map_err(|_| Error::usage("too many labels"))?;
    out.extend_from_slice(&n.to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::usage(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

/// Loads an image/label file pair and applies a stratified 80/20 split with seed 0.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let images = decode_idx_images(&fs::read(images_path)?)?;
    let labels = decode_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            4,
            format!("label file has {} entries for {} images", labels.len(), images.len()),
        ));
    }
    DatasetSplit::stratified(images, labels, 0.2, 0)
}

pub fn save_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    images: &[Image],
    labels: &[usize],
) -> Result<()> {
    fs::write(images_path, encode_idx_images(images)?)?;
    fs::write(labels_path, encode_idx_labels(labels)?)?;
    Ok(())
}
