//! Binary 8-bit portable grey maps (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};

/// Quantises a `[0, 1]` intensity to the nearest 8-bit level.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| to_byte(v)));
    out
}

/// Writes intensities in `[0, 1]` (clamped) as an 8-bit grey image.
pub fn write_unit(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    std::fs::write(path, encode(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Parses a `P5` image into `(width, height, intensities / 255)`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |detail: &str| Error::Parse {
        path: path.to_path_buf(),
        record: 0,
        detail: detail.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    pos += 1;
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated PGM pixel data"))?;
    Ok((w, h, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
