//! Binary greyscale PGM (P5, maxval 255).

use std::path::Path;

use crate::error::{Error, PgmError, Result};
use crate::tensor::Tensor;

/// Raw 8-bit greyscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PgmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| PgmError::MalformedHeader(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Gray, PgmError> {
    let magic = &bytes[..bytes.len().min(2)];
    if magic != b"P5" {
        return Err(PgmError::BadMagic(String::from_utf8_lossy(magic).into_owned()));
    }
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(PgmError::MalformedHeader("no separator after magic".into()));
    }
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::MalformedHeader(format!("empty raster {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PgmError::UnsupportedMaxval(maxval));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::MalformedHeader("no separator after maxval".into()));
    }
    let payload = &bytes[h.pos + 1..];
    let expected = width * height;
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(Gray {
        width,
        height,
        pixels: payload[..expected].to_vec(),
    })
}

/// Canonical encoding: `P5\n<w> <h>\n255\n` then the raster.
pub fn encode(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_gray(path: &Path) -> Result<Gray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|kind| Error::Pgm {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn write_gray(path: &Path, img: &Gray) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// Pixels as `p / 255`, shaped `[H, W, 1]`.
pub fn to_tensor(img: &Gray) -> Tensor {
    let data = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new([img.height, img.width, 1], data).expect("raster size matches")
}

/// Single-channel tensor `[H, W]` or `[H, W, 1]` to pixels via
/// `round(clamp(x, 0, 1) * 255)`.
pub fn from_tensor(t: &Tensor) -> Result<Gray> {
    let (height, width) = match t.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::invalid(format!("pgm needs a single-channel image, got shape {s:?}"))),
    };
    let pixels = t
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(Gray { width, height, pixels })
}

pub fn read(path: &Path) -> Result<Tensor> {
    Ok(to_tensor(&read_gray(path)?))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    write_gray(path, &from_tensor(t)?)
}
