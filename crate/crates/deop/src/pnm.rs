//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

/// Decoded raster: `channels` interleaved bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    write(path, b"P6", width, height, rgb)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height, "gray buffer size");
    write(path, b"P5", width, height, gray)
}

fn write(path: &Path, magic: &[u8], width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(data.len() + 20);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(data);
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, b"P6", 3).map_err(|(offset, reason)| Error::Parse {
        path: path.into(),
        offset,
        reason,
    })
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, b"P5", 1).map_err(|(offset, reason)| Error::Parse {
        path: path.into(),
        offset,
        reason,
    })
}

type Decoded<T> = std::result::Result<T, (usize, String)>;

/// Header fields are whitespace separated and may be interleaved with
/// `#` comments; exactly one whitespace byte precedes the raster.
pub fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Decoded<Raster> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err((
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        pos = skip_space(bytes, pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err((pos, "expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or((start, "header field out of range".to_string()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err((
            pos,
            format!("only 8-bit images are supported, maxval {maxval}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err((pos, "empty image".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err((pos, "expected whitespace before the raster".into()));
    }
    pos += 1;
    let len = width * height * channels;
    let available = bytes.len() - pos;
    if available < len {
        return Err((
            bytes.len(),
            format!("truncated raster: {available} of {len} bytes"),
        ));
    }
    if available > len {
        return Err((pos + len, "trailing bytes after the raster".into()));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: bytes[pos..].to_vec(),
    })
}

fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => pos += 1,
            _ => break,
        }
    }
    pos
}
