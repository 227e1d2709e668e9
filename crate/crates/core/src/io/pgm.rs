//! Minimal PGM (P2/P5) support for grayscale inputs and activation dumps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lln::ActivationMap;

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::config(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

fn format_err(path: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses whitespace/comment separated header tokens; returns the value and
/// the position just past it.
fn header_token(path: &str, bytes: &[u8], mut pos: usize) -> Result<(usize, usize)> {
    loop {
        match bytes.get(pos) {
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                    pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => break,
            None => return Err(format_err(path, pos, "truncated PGM header")),
        }
    }
    let start = pos;
    while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
        pos += 1;
    }
    let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
    let v = text
        .parse()
        .map_err(|_| format_err(path, start, "expected a decimal number"))?;
    Ok((v, pos))
}

pub fn decode_pgm(path: &str, bytes: &[u8]) -> Result<GrayImage> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(format_err(path, 0, "not a PGM file (P2/P5)")),
    };
    let (width, pos) = header_token(path, bytes, 2)?;
    let (height, pos) = header_token(path, bytes, pos)?;
    let (maxval, pos) = header_token(path, bytes, pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format_err(path, 2, "invalid PGM dimensions or maxval"));
    }
    let n = width * height;
    let scale = maxval as f64;
    let pixels = if binary {
        let start = pos + 1;
        let bpp = if maxval > 255 { 2 } else { 1 };
        let need = start + n * bpp;
        if bytes.len() < need {
            return Err(format_err(
                path,
                bytes.len(),
                format!("truncated PGM raster: {} bytes, expected {need}", bytes.len()),
            ));
        }
        let raster = &bytes[start..need];
        if bpp == 1 {
            raster.iter().map(|&b| b as f64 / scale).collect()
        } else {
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
                .collect()
        }
    } else {
        let mut out = Vec::with_capacity(n);
        let mut p = pos;
        for _ in 0..n {
            let (v, next) = header_token(path, bytes, p)?;
            out.push(v as f64 / scale);
            p = next;
        }
        out
    };
    GrayImage::new(width, height, pixels)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&path.display().to_string(), &bytes)
}

/// 8-bit binary PGM; intensities are clamped to `[0, 1]`.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

/// One pixel per cell, min-max scaled to 0..=255. A constant map (including
/// all zeros) renders black.
pub fn activation_image(activations: &ActivationMap) -> GrayImage {
    let vals = activations.values();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pixels = vals
        .iter()
        .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect();
    GrayImage {
        width: activations.width(),
        height: activations.height(),
        pixels,
    }
}

pub fn dump_activation_map(activations: &ActivationMap, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(path, &activation_image(activations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_one_hot_scaling() {
        let c = ActivationMap::new(2, 3, vec![4.0; 6]).unwrap();
        assert!(activation_image(&c).pixels.iter().all(|&p| p == 0.0));
        let mut v = vec![0.0; 6];
        v[4] = 0.3;
        let img = activation_image(&ActivationMap::new(2, 3, v).unwrap());
        let bytes = encode_pgm(&img);
        let raster = &bytes[bytes.len() - 6..];
        assert_eq!(raster, &[0, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn ascii_and_binary_decode() {
        let ascii = b"P2\n# comment\n3 1\n10\n0 5 10\n";
        let img = decode_pgm("a", ascii).unwrap();
        assert_eq!(img.pixels, vec![0.0, 0.5, 1.0]);
        let img2 = decode_pgm("b", &encode_pgm(&img)).unwrap();
        assert_eq!((img2.width, img2.height), (3, 1));
        assert!((img2.pixels[1] - 128.0 / 255.0).abs() < 1e-12);
        assert!(decode_pgm("c", b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_pgm("d", b"P5\n4 4\n255\n\0").is_err());
    }
}
