//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use mlim_core::data::ImageTensor;

use crate::error::{AppError, AppResult};

pub fn encode(image: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_bytes());
    out
}

#[derive(Debug, PartialEq, Eq)]
pub enum PpmError {
    BadMagic,
    BadHeader(&'static str),
    UnsupportedMaxval(u32),
    Truncated { expected: usize, found: usize },
    TrailingBytes(usize),
}

impl std::fmt::Display for PpmError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PpmError::BadMagic => write!(f, "not a binary PPM (expected magic P6)"),
            PpmError::BadHeader(what) => write!(f, "malformed PPM header: {what}"),
            PpmError::UnsupportedMaxval(m) => write!(f, "unsupported maxval {m} (only 255)"),
            PpmError::Truncated { expected, found } => {
                write!(f, "truncated PPM payload: expected {expected} bytes, found {found}")
            }
            PpmError::TrailingBytes(n) => write!(f, "{n} unexpected bytes after PPM payload"),
        }
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<u32, PpmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PpmError::BadHeader(what))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ImageTensor, PpmError> {
    if !bytes.starts_with(b"P6") {
        return Err(PpmError::BadMagic);
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader("zero dimension"));
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PpmError::BadHeader("missing separator after maxval"));
    }
    let payload = &bytes[h.pos + 1..];
    let expected = width * height * 3;
    if payload.len() < expected {
        return Err(PpmError::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(PpmError::TrailingBytes(payload.len() - expected));
    }
    Ok(ImageTensor::from_bytes(height, width, payload).expect("payload length checked"))
}

pub fn save_image(image: &ImageTensor, path: &Path) -> AppResult<()> {
    fs::write(path, encode(image)).map_err(|e| AppError::io(path, e))
}

pub fn load_image(path: &Path) -> AppResult<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes).map_err(|e| AppError::format(path, e.to_string()))
}
