//! PGM (P5, 16-bit) and PPM (P6, 8-bit) image files.
//!
//! PGM carries SAR magnitude slices and heatmaps; PPM carries RGB images.
//! Both are binary-variant netpbm with the standard big-endian sample order
//! for 16-bit PGM. Pixel values map linearly from `[0, 1]` to the full
//! sample range on write and back on read.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;

/// Parse netpbm header tokens (whitespace separated, `#` comment lines).
struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderParser { bytes, pos: 0 }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::data("truncated netpbm header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::data("bad number in netpbm header"))
    }

    /// Position just past the single whitespace byte after the maxval.
    fn payload_start(&self) -> usize {
        self.pos + 1
    }
}

/// Write a grayscale image as 16-bit P5. `pixels` is row-major, `w * h`
/// values in `[0, 1]`; out-of-range values are clamped.
pub fn write_pgm16(path: &Path, pixels: &[f64], w: usize, h: usize) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::domain(format!(
            "pgm pixel count {} does not match {}x{}",
            pixels.len(),
            w,
            h
        )));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(w * h * 2);
    for &p in pixels {
        let v = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    atomic_write(path, &out)
}

/// Read a 16-bit P5 file back to `[0, 1]` values plus dimensions.
pub fn read_pgm16(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut hp = HeaderParser::new(&bytes);
    if hp.token()? != b"P5" {
        return Err(Error::data("not a P5 pgm file"));
    }
    let w = hp.number()?;
    let h = hp.number()?;
    let maxval = hp.number()?;
    if maxval != 65535 {
        return Err(Error::data(format!("expected 16-bit pgm, maxval {maxval}")));
    }
    let payload = &bytes[hp.payload_start()..];
    if payload.len() != w * h * 2 {
        return Err(Error::data("pgm payload length mismatch"));
    }
    let pixels = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok((pixels, w, h))
}

/// Write an RGB image as 8-bit P6. `planes` are three row-major channel
/// planes in `[0, 1]`.
pub fn write_ppm8(path: &Path, planes: [&[f64]; 3], w: usize, h: usize) -> Result<()> {
    for plane in &planes {
        if plane.len() != w * h {
            return Err(Error::domain("ppm plane size mismatch"));
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for i in 0..w * h {
        for plane in &planes {
            out.push((plane[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    atomic_write(path, &out)
}

/// Read an 8-bit P6 file to three channel planes in `[0, 1]`.
pub fn read_ppm8(path: &Path) -> Result<([Vec<f64>; 3], usize, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut hp = HeaderParser::new(&bytes);
    if hp.token()? != b"P6" {
        return Err(Error::data("not a P6 ppm file"));
    }
    let w = hp.number()?;
    let h = hp.number()?;
    let maxval = hp.number()?;
    if maxval != 255 {
        return Err(Error::data(format!("expected 8-bit ppm, maxval {maxval}")));
    }
    let payload = &bytes[hp.payload_start()..];
    if payload.len() != w * h * 3 {
        return Err(Error::data("ppm payload length mismatch"));
    }
    let mut planes = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for i in 0..w * h {
        for (c, plane) in planes.iter_mut().enumerate() {
            plane[i] = payload[i * 3 + c] as f64 / 255.0;
        }
    }
    Ok((planes, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let pixels: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write_pgm16(&path, &pixels, 4, 3).unwrap();
        let (back, w, h) = read_pgm16(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in pixels.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }

    #[test]
    fn ppm_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let r: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let g = vec![0.5; 6];
        let b = vec![0.0; 6];
        write_ppm8(&path, [&r, &g, &b], 3, 2).unwrap();
        let (planes, w, h) = read_ppm8(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in r.iter().zip(&planes[0]) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
        assert!(planes[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&0u16.to_be_bytes());
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let (px, w, h) = read_pgm16(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(px, vec![0.0, 1.0]);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n2 2\n255\n\x00\x01").unwrap();
        assert!(read_ppm8(&path).is_err());
    }
}
