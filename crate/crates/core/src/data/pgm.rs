//! Binary greymap (NetPBM `P5`) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded greymap. Samples are row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Greymap, String> {
    if !bytes.starts_with(b"P5") {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or("bad width")?;
    let height = h.number().ok_or("bad height")?;
    let maxval = h.number().ok_or("bad maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let count = width.checked_mul(height).ok_or("dimensions overflow")?;
    let raster = &bytes[h.pos..];
    let samples: Vec<u16> = if maxval < 256 {
        if raster.len() < count {
            return Err(format!("raster holds {} bytes, expected {count}", raster.len()));
        }
        raster[..count].iter().map(|&b| u16::from(b)).collect()
    } else {
        if raster.len() < 2 * count {
            return Err(format!("raster holds {} bytes, expected {}", raster.len(), 2 * count));
        }
        raster[..2 * count].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(s) = samples.iter().find(|&&s| usize::from(s) > maxval) {
        return Err(format!("sample {s} exceeds maxval {maxval}"));
    }
    Ok(Greymap { width, height, maxval: maxval as u16, samples })
}

pub fn encode_pgm(map: &Greymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, map.maxval).into_bytes();
    if map.maxval < 256 {
        out.extend(map.samples.iter().map(|&s| s as u8));
    } else {
        for s in &map.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<Greymap> {
    let bytes = fs::read(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    decode_pgm(&bytes).map_err(|msg| Error::ingest(path, msg))
}

pub fn write_pgm(path: &Path, map: &Greymap) -> Result<()> {
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5\n# made by hand\n3 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let map = decode_pgm(&bytes).unwrap();
        assert_eq!((map.width, map.height, map.maxval), (3, 1, 255));
        assert_eq!(map.samples, vec![0, 128, 255]);
    }

    #[test]
    fn sixteen_bit_samples_are_big_endian() {
        let map = Greymap { width: 2, height: 1, maxval: 1000, samples: vec![1, 999] };
        let bytes = encode_pgm(&map);
        assert!(bytes.ends_with(&[0, 1, 3, 231]));
        assert_eq!(decode_pgm(&bytes).unwrap(), map);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n0\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n10\n\x0b").is_err());
    }
}
