//! AGRD1 binary grid files.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | field                                      |
//! |--------|------|--------------------------------------------|
//! | 0      | 5    | magic `AGRD1`                              |
//! | 5      | 1    | kind: 0 = f64 image, 1 = u8 mask, 2 = f64 anomaly map |
//! | 6      | 4    | width (u32)                                |
//! | 10     | 4    | height (u32)                               |
//! | 14     | 8    | spacing (f64, mm per pixel)                |
//! | 22     | ...  | row-major payload: f64 per pixel, or one byte (0/1) per mask pixel |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{AnomalyMap, BinaryMask, Geometry, Grid, Image2D};

pub const MAGIC: &[u8; 5] = b"AGRD1";
pub const HEADER_LEN: usize = 22;

const KIND_IMAGE: u8 = 0;
const KIND_MASK: u8 = 1;
const KIND_ANOMALY: u8 = 2;

/// Serialises a grid into AGRD1 bytes.
pub fn encode(grid: &Grid) -> Vec<u8> {
    let geom = grid.geometry();
    let kind = match grid {
        Grid::Image(_) => KIND_IMAGE,
        Grid::Mask(_) => KIND_MASK,
        Grid::Anomaly(_) => KIND_ANOMALY,
    };
    let per_pixel = if kind == KIND_MASK { 1 } else { 8 };
    let mut out = Vec::with_capacity(HEADER_LEN + geom.len() * per_pixel);
    out.extend_from_slice(MAGIC);
    out.push(kind);
    out.extend_from_slice(&(geom.width() as u32).to_le_bytes());
    out.extend_from_slice(&(geom.height() as u32).to_le_bytes());
    out.extend_from_slice(&geom.spacing().to_le_bytes());
    match grid {
        Grid::Image(img) => img
            .pixels()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Grid::Anomaly(map) => map
            .scores()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Grid::Mask(mask) => out.extend(mask.pixels().iter().map(|&b| b as u8)),
    }
    out
}

/// Parses AGRD1 bytes. `path` is only used for error context.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Grid> {
    let err = |msg: String| Error::format(path, msg);
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(err("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(err("truncated header".into()));
    }
    let kind = bytes[5];
    let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let spacing = f64::from_le_bytes(bytes[14..22].try_into().unwrap());
    if width == 0 || height == 0 {
        return Err(err(format!("invalid width/height {width}x{height}")));
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(err(format!("invalid spacing {spacing}")));
    }
    let geom = Geometry::new(width, height, spacing).map_err(|e| err(e.to_string()))?;
    let payload = &bytes[HEADER_LEN..];
    let per_pixel = match kind {
        KIND_IMAGE | KIND_ANOMALY => 8,
        KIND_MASK => 1,
        other => return Err(err(format!("unknown kind byte {other}"))),
    };
    let expected = geom.len() * per_pixel;
    if payload.len() < expected {
        return Err(err(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(err(format!(
            "trailing bytes after payload: expected {expected}, found {}",
            payload.len()
        )));
    }

    if kind == KIND_MASK {
        let mut pixels = Vec::with_capacity(geom.len());
        for (i, &b) in payload.iter().enumerate() {
            match b {
                0 => pixels.push(false),
                1 => pixels.push(true),
                other => return Err(err(format!("mask pixel {i} has byte value {other}"))),
            }
        }
        return Ok(Grid::Mask(BinaryMask::new(geom, pixels)?));
    }

    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(err(format!("pixel {i} is not finite")));
    }
    if kind == KIND_IMAGE {
        Ok(Grid::Image(Image2D::new(geom, values)?))
    } else {
        if let Some(i) = values.iter().position(|v| *v < 0.0) {
            return Err(err(format!("score {i} is negative")));
        }
        Ok(Grid::Anomaly(AnomalyMap::new(geom, values)?))
    }
}

pub fn write_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image2D> {
    let path = path.as_ref();
    match read_grid(path)? {
        Grid::Image(g) => Ok(g),
        other => Err(Error::format(
            path,
            format!("expected image, found {}", other.kind_name()),
        )),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    match read_grid(path)? {
        Grid::Mask(g) => Ok(g),
        other => Err(Error::format(
            path,
            format!("expected mask, found {}", other.kind_name()),
        )),
    }
}

pub fn read_anomaly_map(path: impl AsRef<Path>) -> Result<AnomalyMap> {
    let path = path.as_ref();
    match read_grid(path)? {
        Grid::Anomaly(g) => Ok(g),
        other => Err(Error::format(
            path,
            format!("expected anomaly map, found {}", other.kind_name()),
        )),
    }
}
