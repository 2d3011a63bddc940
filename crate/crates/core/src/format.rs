//! `HSC1` cube files and small file helpers.
//!
//! `HSC1` layout: ASCII magic `HSC1`, then `H`, `W`, `C` as little-endian
//! `u32`, then `H*W*C` little-endian `f32` values in `(h, w, c)` order.
//! Masks and measurements are stored with `C = 1`.

use std::io::Write;
use std::path::Path;

use crate::cassi::{CodedMask, Measurement, SpectralCube};
use crate::error::{Error, Result};

pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";
const HEADER_LEN: usize = 16;

/// Raw decoded contents of an `HSC1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Hsc1 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn encode_hsc1(height: usize, width: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(data.len(), height * width * channels);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(HSC1_MAGIC);
    for v in [height, width, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "HSC1 file",
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn decode_hsc1(bytes: &[u8]) -> Result<Hsc1> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != HSC1_MAGIC {
        return Err(format_err(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (height, width, channels) = (dim(0), dim(1), dim(2));
    let count = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| format_err(4, "dimensions overflow"))?;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        // offset of the first missing byte
        return Err(format_err(
            bytes.len(),
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Hsc1 {
        height,
        width,
        channels,
        data,
    })
}

impl Hsc1 {
    pub fn into_cube(self) -> Result<SpectralCube> {
        SpectralCube::new(self.height, self.width, self.channels, self.data)
    }

    pub fn into_mask(self) -> Result<CodedMask> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "mask file must have C = 1, got {}",
                self.channels
            )));
        }
        CodedMask::new(self.height, self.width, self.data)
    }

    pub fn into_measurement(self) -> Result<Measurement> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "measurement file must have C = 1, got {}",
                self.channels
            )));
        }
        Measurement::new(self.height, self.width, self.data)
    }
}

pub fn cube_bytes(cube: &SpectralCube) -> Vec<u8> {
    encode_hsc1(cube.height(), cube.width(), cube.channels(), cube.data())
}

pub fn mask_bytes(mask: &CodedMask) -> Vec<u8> {
    encode_hsc1(mask.height(), mask.width(), 1, mask.values())
}

pub fn measurement_bytes(meas: &Measurement) -> Vec<u8> {
    encode_hsc1(meas.height(), meas.width(), 1, meas.data())
}

pub fn read_hsc1(path: &Path) -> Result<Hsc1> {
    decode_hsc1(&std::fs::read(path)?)
}

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never sees a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// 8-bit binary PGM of one `H x W` band, values clipped to `[0, 1]`.
pub fn band_pgm(height: usize, width: usize, band: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(band.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
