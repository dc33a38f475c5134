//! Binary PPM (P6, maxval 255) images.

use std::fs;
use std::path::Path;

use versreid_core::Image;

use crate::error::{Error, Result};

/// `[0, 1]` to a byte, rounding half up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// Byte-level cursor over a PPM header.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, (usize, String)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err((start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or((start, format!("{what} out of range")))
    }
}

/// Parses a P6 image. Errors carry the byte offset of the problem.
pub fn decode(bytes: &[u8]) -> std::result::Result<Image, (usize, String)> {
    if !bytes.starts_with(b"P6") {
        return Err((0, "missing P6 magic".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err((maxval_at, format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err((h.pos, "expected a single whitespace after maxval".into())),
    }
    if width == 0 || height == 0 {
        return Err((2, "zero image dimension".into()));
    }
    let need = width * height * 3;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err((
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err((h.pos + need, "trailing bytes after payload".into()));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, data).map_err(|e| (h.pos, e.to_string()))
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(offset, msg)| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    })
}
