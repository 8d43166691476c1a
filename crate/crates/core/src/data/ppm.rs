//! Binary PPM (P6, maxval 255).

use std::path::Path;

use super::image::{ImageTensor, CHANNELS};
use crate::error::{Error, Result};

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Quantizes to 8 bits with rounding.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..CHANNELS {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PpmHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PpmHeader(format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 {
        return Err(Error::PpmHeader("file too short".into()));
    }
    if &bytes[..2] != b"P6" {
        return Err(Error::PpmMagic(String::from_utf8_lossy(&bytes[..2]).into_owned()));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::PpmHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::PpmMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::PpmHeader("missing separator after maxval".into())),
    }
    let expected = width * height * CHANNELS;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::PpmTruncated {
            expected,
            found: payload.len(),
        });
    }
    let hwc: Vec<f64> = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    ImageTensor::from_hwc(height, width, &hwc)
}
