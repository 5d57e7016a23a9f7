//! Binary greymap (P5) images with maxval 255.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match dims");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(width, height, pixels))?;
    Ok(())
}

fn bad(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "PGM image",
        offset,
        msg: msg.into(),
    }
}

/// Parses a P5 image, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<(String, usize)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(start, "unexpected end of header"));
        }
        Ok((
            String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
            start,
        ))
    };
    let (magic, at) = token(bytes)?;
    if magic != "P5" {
        return Err(bad(at, format!("expected magic P5, found {magic:?}")));
    }
    let mut num = |bytes: &[u8]| -> Result<usize> {
        let (t, at) = token(bytes)?;
        t.parse()
            .map_err(|_| bad(at, format!("expected a number, found {t:?}")))
    };
    let width = num(bytes)?;
    let height = num(bytes)?;
    let maxval = num(bytes)?;
    if maxval != 255 {
        return Err(bad(
            pos,
            format!("only maxval 255 is supported, found {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let end = start + width * height;
    if end > bytes.len() {
        return Err(bad(
            bytes.len(),
            format!("raster needs {} bytes", width * height),
        ));
    }
    Ok((width, height, bytes[start..end].to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&std::fs::read(path)?)
}

/// Maps `[0, 1]` to `0..=255` with rounding; values outside are clamped.
pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
