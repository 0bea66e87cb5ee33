//! `G2DI` binary model files.
//!
//! Layout (little-endian): magic `G2DI`, `u32` version (1), `u32` width,
//! `u32` height, `u32` count, then `count` records of eight `f32`:
//! `mu_x, mu_y, s1, s2, theta, r, g, b`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, PARAMS_PER_GAUSSIAN};

pub const MAGIC: &[u8; 4] = b"G2DI";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const RECORD_LEN: usize = PARAMS_PER_GAUSSIAN * 4;

pub fn encode(set: &GaussianSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * RECORD_LEN);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, set.width as u32, set.height as u32, set.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in &set.gaussians {
        for v in g.to_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "G2DI",
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<GaussianSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "missing G2DI magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, width, height, count) = (word(0), word(1), word(2), word(3));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(8, "zero raster size"));
    }
    if count == 0 {
        return Err(format_err(16, "model contains no Gaussians"));
    }
    let expected = HEADER_LEN + count as usize * RECORD_LEN;
    if bytes.len() < expected {
        let whole = (bytes.len() - HEADER_LEN) / RECORD_LEN;
        return Err(format_err(
            bytes.len(),
            format!("truncated after {whole} of {count} records (expected {expected} bytes)"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after last record"));
    }
    let params: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GaussianSet::from_params(width as usize, height as usize, &params))
}

pub fn write_to(set: &GaussianSet, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(set))?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<GaussianSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Writes through a temporary sibling file so readers never see a partial model.
pub fn save(set: &GaussianSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("g2d.partial");
    std::fs::write(&tmp, encode(set))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<GaussianSet> {
    decode(&std::fs::read(path)?)
}
