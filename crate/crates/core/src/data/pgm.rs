//! Binary graymap (P5) encoding, 8- and 16-bit.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pgm(img: &Tensor, maxval: u16) -> Result<Vec<u8>> {
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Unsupported(format!("PGM maxval {maxval}")));
    }
    if img.rank() != 2 {
        return Err(Error::Data(format!("PGM needs an H×W image, got {:?}", img.shape())));
    }
    if let Some(bad) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
    }
    let (h, w) = (img.rows(), img.cols());
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    let scale = maxval as f64;
    for &v in img.data() {
        let q = (v * scale).round() as u16;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(c.fail("missing P5 magic (only binary graymaps are supported)"));
    }
    c.pos = 2;
    let w = c.number("width")? as usize;
    let h = c.number("height")? as usize;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::Format {
            offset: maxval_at,
            msg: format!("empty image {w}×{h}"),
        });
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Unsupported(format!("PGM maxval {maxval}")));
    }
    if !c.bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.fail("expected a single whitespace byte after maxval"));
    }
    c.pos += 1;
    let sample = if maxval == 255 { 1 } else { 2 };
    let need = w * h * sample;
    let body = &bytes[c.pos..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated raster: {} of {need} bytes", body.len()),
        });
    }
    // Divide rather than multiply by 1/maxval so that q/maxval is exact to the ulp.
    let scale = maxval as f64;
    let data: Vec<f64> = if sample == 1 {
        body[..need].iter().map(|&b| b as f64 / scale).collect()
    } else {
        body[..need]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / scale)
            .collect()
    };
    Tensor::new(vec![h, w], data)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor, maxval: u16) -> Result<()> {
    fs::write(path, encode_pgm(img, maxval)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

/// `.pgm` files of a directory in lexicographic filename order.
pub fn list_pgm_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
