//! Binary greyscale PGM (`P5`) at 8 or 16 bits per pixel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Writes a single-channel image with values clamped to `[0, 1]`.
pub fn write_pgm<W: Write>(mut w: W, img: &Image, depth: BitDepth) -> Result<()> {
    let s = img.shape();
    if s.channels != 1 {
        return Err(Error::ShapeMismatch(format!("PGM holds one channel, image has {}", s.channels)));
    }
    let maxval = depth.maxval();
    write!(w, "P5\n{} {}\n{}\n", s.width, s.height, maxval)?;
    let mut bytes = Vec::with_capacity(img.len() * 2);
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        match depth {
            BitDepth::Eight => bytes.push(q as u8),
            BitDepth::Sixteen => bytes.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn save_pgm(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<()> {
    write_pgm(BufWriter::new(File::create(path)?), img, depth)
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

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PGM header: bad {what}")))
    }
}

/// Reads a `P5` image scaled to `[0, 1]`.
pub fn read_pgm<R: Read>(mut r: R) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (expected magic P5)".into()));
    }
    let mut h = Header { bytes: &bytes, pos: 2 };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM header: maxval {maxval} out of range")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PGM header: missing separator before pixel data".into()));
    }
    let data = &bytes[h.pos + 1..];
    let bpp = if maxval < 256 { 1 } else { 2 };
    let n = width * height;
    if data.len() < n * bpp {
        return Err(Error::Format(format!("PGM payload truncated: {} of {} bytes", data.len(), n * bpp)));
    }
    let scale = maxval as f64;
    let values = (0..n)
        .map(|i| {
            let q = if bpp == 1 { data[i] as u32 } else { u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as u32 };
            q as f64 / scale
        })
        .collect();
    Image::from_vec(Shape::gray(height, width), values)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    read_pgm(BufReader::new(File::open(path)?))
}
