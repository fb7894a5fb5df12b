//! Binary PGM (`P5`, maxval 255) reading and writing.
//!
//! Intensities are normalized to `[0, 1]` on load; on write values are
//! clamped to `[0, 1]` and quantized to the nearest of 256 levels. Binary
//! `P6` input is accepted and collapsed to luma.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{luminance, Field};

/// The header text written before the payload.
pub fn header(width: usize, height: usize) -> String {
    format!("P5\n{width} {height}\n255\n")
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(field: &Field) -> Vec<u8> {
    let head = header(field.width(), field.height());
    let mut out = Vec::with_capacity(head.len() + field.len());
    out.extend_from_slice(head.as_bytes());
    out.extend(field.values().iter().map(|&v| quantize(v)));
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &'static str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(field, "expected a decimal number"));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(field, "number out of range"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Field> {
    if bytes.len() < 2 {
        return Err(Error::format("magic", "file too short"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        b"P2" | b"P3" => {
            return Err(Error::format("magic", "ASCII PNM is not supported"));
        }
        other => {
            return Err(Error::format(
                "magic",
                format!("unrecognized magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut cur = Cursor { buf: bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format("maxval", format!("expected 255, got {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format("header", "missing whitespace after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("width", "image size overflows"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::format(
            "payload",
            format!("truncated: expected {need} bytes, found {}", payload.len()),
        ));
    }
    let values = if channels == 1 {
        payload[..need].iter().map(|&b| b as f64 / 255.0).collect()
    } else {
        payload[..need]
            .chunks_exact(3)
            .map(|px| luminance(px[0], px[1], px[2]))
            .collect()
    };
    Field::new(height, width, values)
}

pub fn write_pgm(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(field)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_roundtrip_is_exact_after_quantization() {
        let f = Field::from_fn(4, 4, |i, j| (i * 4 + j) as f64 / 15.0);
        let back = decode(&encode(&f)).unwrap();
        assert_eq!(back.shape(), (4, 4));
        for (a, b) in f.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // A second trip through the codec is lossless.
        assert_eq!(decode(&encode(&back)).unwrap(), back);
    }

    #[test]
    fn zero_field_file_layout() {
        let f = Field::zeros(64, 64);
        let bytes = encode(&f);
        let head = header(64, 64);
        assert_eq!(head, "P5\n64 64\n255\n");
        assert_eq!(bytes.len(), head.len() + 4096);
        assert!(bytes[head.len()..].iter().all(|&b| b == 0));
    }

    fn field_of(err: Error) -> &'static str {
        match err {
            Error::Format { field, .. } => field,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ascii_pgm_is_rejected() {
        assert_eq!(field_of(decode(b"P2\n3 3\n255\n0 0 0").unwrap_err()), "magic");
    }

    #[test]
    fn bad_maxval_and_truncation_are_named() {
        assert_eq!(field_of(decode(b"P5\n3 3\n65535\n").unwrap_err()), "maxval");
        let mut short = b"P5\n3 3\n255\n".to_vec();
        short.extend_from_slice(&[0; 5]);
        assert_eq!(field_of(decode(&short).unwrap_err()), "payload");
        assert_eq!(field_of(decode(b"P5\nx 3\n255\n").unwrap_err()), "width");
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n3 3\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[255; 9]);
        let f = decode(&bytes).unwrap();
        assert!(f.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rgb_input_collapses_to_luma() {
        let mut bytes = b"P6\n3 3\n255\n".to_vec();
        for _ in 0..9 {
            bytes.extend_from_slice(&[255, 0, 0]);
        }
        let f = decode(&bytes).unwrap();
        assert!(f.values().iter().all(|&v| (v - 0.299).abs() < 1e-12));
    }

    #[test]
    fn masks_write_as_0_and_255() {
        let m = Field::from_fn(3, 5, |i, j| ((i + j) % 2) as f64);
        let bytes = encode(&m);
        let head = header(5, 3).len();
        assert!(bytes[head..].iter().all(|&b| b == 0 || b == 255));
    }
}
