//! PFM float-image reading and writing.
//!
//! `Pf` is single-channel, `PF` three-channel. The scale line's sign encodes
//! endianness (negative = little endian); scanlines are stored bottom-up.
//! The reader is panic-free on arbitrary bytes and is a fuzz target.

use crate::error::{EngineError, Result};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, top-down, `width * height * channels` values.
    pub data: Vec<f32>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum PfmError {
    BadMagic,
    BadHeader,
    DimsTooLarge,
    Truncated,
}

impl std::fmt::Display for PfmError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PfmError::BadMagic => write!(f, "not a PFM file (missing Pf/PF magic)"),
            PfmError::BadHeader => write!(f, "malformed PFM header"),
            PfmError::DimsTooLarge => write!(f, "PFM dimensions exceed supported size"),
            PfmError::Truncated => write!(f, "PFM pixel data truncated"),
        }
    }
}

const MAX_PIXELS: usize = 1 << 26;

/// One whitespace-delimited header token; PFM allows any ASCII whitespace.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(bytes[start..*pos].to_vec())
    } else {
        None
    }
}

/// Parses a PFM file from raw bytes.
pub fn parse(bytes: &[u8]) -> std::result::Result<PfmImage, PfmError> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or(PfmError::BadMagic)?;
    let channels = match magic.as_slice() {
        b"Pf" => 1,
        b"PF" => 3,
        _ => return Err(PfmError::BadMagic),
    };
    let width: usize = std::str::from_utf8(&next_token(bytes, &mut pos).ok_or(PfmError::BadHeader)?)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PfmError::BadHeader)?;
    let height: usize =
        std::str::from_utf8(&next_token(bytes, &mut pos).ok_or(PfmError::BadHeader)?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PfmError::BadHeader)?;
    let scale: f32 = std::str::from_utf8(&next_token(bytes, &mut pos).ok_or(PfmError::BadHeader)?)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PfmError::BadHeader)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(PfmError::BadHeader);
    }
    if width == 0 || height == 0 {
        return Err(PfmError::BadHeader);
    }
    let pixels = width.checked_mul(height).ok_or(PfmError::DimsTooLarge)?;
    let count = pixels.checked_mul(channels).ok_or(PfmError::DimsTooLarge)?;
    if pixels > MAX_PIXELS {
        return Err(PfmError::DimsTooLarge);
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() {
        return Err(PfmError::Truncated);
    }
    pos += 1;
    let need = count.checked_mul(4).ok_or(PfmError::DimsTooLarge)?;
    let body = bytes.get(pos..pos + need).ok_or(PfmError::Truncated)?;
    let little = scale < 0.0;
    let mut data = vec![0.0f32; count];
    let row_len = width * channels;
    for y in 0..height {
        // PFM stores the bottom scanline first.
        let src_row = height - 1 - y;
        for i in 0..row_len {
            let off = (src_row * row_len + i) * 4;
            let raw: [u8; 4] = body[off..off + 4].try_into().unwrap();
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[y * row_len + i] = v;
        }
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

/// Serializes a single-channel map (top-down rows) as little-endian `Pf`.
pub fn encode_gray(width: usize, height: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(data.len(), width * height);
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    out.extend_from_slice(format!("Pf\n{width} {height}\n-1.0\n").as_bytes());
    for y in 0..height {
        let src_row = height - 1 - y;
        for x in 0..width {
            out.extend_from_slice(&(data[src_row * width + x] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_gray(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    let bytes = encode_gray(width, height, data);
    let mut f = std::fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| EngineError::io(path, e))
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| EngineError::io(path, e))?;
    let img = parse(&bytes)
        .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
    if img.channels != 1 {
        return Err(EngineError::Config(format!(
            "{}: expected single-channel PFM",
            path.display()
        )));
    }
    let data = img.data.iter().map(|&v| v as f64).collect();
    Ok((img.width, img.height, data))
}
