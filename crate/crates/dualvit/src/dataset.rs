//! `DVDS` v1, a packed 8-bit RGB image dataset.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `DVDS` |
//! | 4 | u32 version, 1 |
//! | 4 | u32 sample count N |
//! | 2 | u16 height H |
//! | 2 | u16 width W |
//! | 2 | u16 channels, always 3 |
//! | 2 | u16 class count |
//!
//! followed by N records of a u16 label and H·W·3 bytes (row-major,
//! channel-last). A byte `k` decodes to `k / 255`.

use std::fs;
use std::path::Path;

use dualvit_core::data::Dataset;
use dualvit_core::model::IMAGE_CHANNELS;
use dualvit_core::Tensor;

use crate::bytes::{FormatError, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

fn level_value(level: u8) -> f32 {
    level as f32 / 255.0
}

/// Parses a complete `DVDS` file.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let n = r.u32("sample count")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let channels = r.u16("channels")?;
    let classes = r.u16("class count")? as usize;
    if n == 0 {
        return Err(r.invalid(8, "dataset has no samples").into());
    }
    if h == 0 || w == 0 {
        return Err(r.invalid(12, format!("empty {h}x{w} images")).into());
    }
    if channels as usize != IMAGE_CHANNELS {
        return Err(r.invalid(16, format!("expected 3 channels, found {channels}")).into());
    }
    if classes == 0 {
        return Err(r.invalid(18, "class count is zero").into());
    }

    let pixels = h * w * IMAGE_CHANNELS;
    let record = 2 + pixels;
    let Some(expected) = n.checked_mul(record) else {
        return Err(r.invalid(8, format!("{n} records of {record} bytes overflow the address space")).into());
    };
    if r.remaining() < expected {
        return Err(
            FormatError::Truncated { offset: HEADER_LEN, what: "payload", expected, actual: r.remaining() }.into()
        );
    }
    if r.remaining() > expected {
        let extra = r.remaining() - expected;
        return Err(r.invalid(HEADER_LEN + expected, format!("{extra} trailing bytes after the last record")).into());
    }

    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pixels);
    for _ in 0..n {
        let at = r.offset();
        let label = r.u16("label")? as usize;
        if label >= classes {
            return Err(r.invalid(at, format!("label {label} out of range for {classes} classes")).into());
        }
        labels.push(label);
        data.extend(r.take(pixels, "image")?.iter().map(|&b| level_value(b)));
    }
    let images = Tensor::new([n, h, w, IMAGE_CHANNELS], data)?;
    Ok(Dataset::new(images, labels, classes)?)
}

/// Serializes `dataset`. Every value must sit exactly on an 8-bit level
/// (`k / 255`); anything else would not survive the round trip and is
/// rejected instead of rounded.
pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let n = dataset.len();
    let (h, w) = (dataset.height(), dataset.width());
    let fits16 = |v: usize| u16::try_from(v).ok();
    let (Some(h16), Some(w16), Some(classes)) = (fits16(h), fits16(w), fits16(dataset.num_classes)) else {
        return Err(Error::Encode(format!(
            "{h}x{w} images with {} classes exceed the u16 header fields",
            dataset.num_classes
        )));
    };
    let n32 = u32::try_from(n).map_err(|_| Error::Encode(format!("{n} samples exceed the u32 count field")))?;
    if n == 0 {
        return Err(Error::Encode("dataset has no samples".into()));
    }

    let mut out = Vec::with_capacity(HEADER_LEN + n * (2 + h * w * IMAGE_CHANNELS));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&h16.to_le_bytes());
    out.extend_from_slice(&w16.to_le_bytes());
    out.extend_from_slice(&(IMAGE_CHANNELS as u16).to_le_bytes());
    out.extend_from_slice(&classes.to_le_bytes());
    for i in 0..n {
        out.extend_from_slice(&(dataset.labels[i] as u16).to_le_bytes());
        for &v in dataset.image(i) {
            let level = (v * 255.0).round();
            if !(0.0..=255.0).contains(&level) || level_value(level as u8) != v {
                return Err(Error::Encode(format!("sample {i} holds {v}, which is not an 8-bit level")));
            }
            out.push(level as u8);
        }
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
