//! Binary PGM (P5, maxval 255) reading and writing, and bilinear resizing.

use std::fs;
use std::path::Path;

use crate::patch::ImageGray;
use crate::{Error, Result};

fn format_err(field: impl Into<String>) -> Error {
    Error::Format {
        format: "pgm",
        field: field.into(),
    }
}

/// Encodes a square image as P5 bytes; pixels map to `round(v·255)`.
pub fn encode_pgm(img: &ImageGray) -> Vec<u8> {
    let side = img.side();
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(img.pixels().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(field))
    }
}

/// Decodes P5 bytes. Only square images are accepted.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGray> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err("magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(format!("maxval {maxval}")));
    }
    if width == 0 || width != height {
        return Err(format_err(format!("size {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("raster separator"));
    }
    let raster = &bytes[h.pos + 1..];
    let n = width * height;
    if raster.len() < n {
        return Err(format_err(format!("raster: {} of {n} bytes", raster.len())));
    }
    if raster.len() > n {
        return Err(format_err("raster: trailing bytes"));
    }
    ImageGray::new(width, raster.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn save_pgm(img: &ImageGray, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<ImageGray> {
    decode_pgm(&fs::read(path)?)
}

/// Bilinear resampling with half-pixel centers (corners not aligned).
///
/// Output pixel `d` samples source coordinate `(d + 0.5)·src/dst − 0.5`,
/// clamped to `[0, src − 1]`, on both axes.
pub fn resize_bilinear(img: &ImageGray, target_side: usize) -> Result<ImageGray> {
    if target_side == 0 {
        return Err(Error::contract("target side must be positive"));
    }
    let src = img.side();
    if target_side == src {
        return Ok(img.clone());
    }
    let scale = src as f64 / target_side as f64;
    let taps: Vec<(usize, usize, f64)> = (0..target_side)
        .map(|d| {
            let x = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            (i0, (i0 + 1).min(src - 1), x - i0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(target_side * target_side);
    for &(r0, r1, fy) in &taps {
        for &(c0, c1, fx) in &taps {
            let top = img.get(r0, c0) as f64 * (1.0 - fx) + img.get(r0, c1) as f64 * fx;
            let bottom = img.get(r1, c0) as f64 * (1.0 - fx) + img.get(r1, c1) as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
        }
    }
    ImageGray::new(target_side, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn representable_values_round_trip_exactly() {
        let img = ImageGray::new(2, vec![0.0, 85.0 / 255.0, 170.0 / 255.0, 1.0]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 85, 170, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P5 # made by hand\n2 # w\n2\n255\n".to_vec();
        bytes.extend([0, 255, 255, 0]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn malformed_headers_name_the_field() {
        let field = |b: &[u8]| match decode_pgm(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(b"P2\n2 2\n255\n0000"), "magic");
        assert!(field(b"P5\n2 2\n65535\n\0\0\0\0").starts_with("maxval"));
        assert_eq!(field(b"P5\nx 2\n255\n"), "width");
        assert!(field(b"P5\n2 2\n255\n\0\0").starts_with("raster"));
        assert!(field(b"P5\n2 3\n255\n\0\0\0\0\0\0").starts_with("size"));
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let img = ImageGray::new(2, vec![0.0, 0.2, 0.4, 0.6]).unwrap();
        let out = resize_bilinear(&img, 4).unwrap();
        // Source coordinates per output index: 0, 0.25, 0.75, 1 (clamped ends).
        let axis = [0.0, 0.25, 0.75, 1.0];
        for (r, fy) in axis.iter().enumerate() {
            for (c, fx) in axis.iter().enumerate() {
                let want = 0.4 * fy + 0.2 * fx;
                assert!((out.get(r, c) as f64 - want).abs() < 1e-6, "({r},{c})");
            }
        }
    }

    #[test]
    fn constant_and_identity() {
        let flat = ImageGray::filled(5, 0.3);
        let big = resize_bilinear(&flat, 13).unwrap();
        assert!(big.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let img = ImageGray::new(2, vec![0.1, 0.9, 0.5, 0.25]).unwrap();
        assert_eq!(resize_bilinear(&img, 2).unwrap(), img);
    }
}
