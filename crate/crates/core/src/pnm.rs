//! Binary PGM (P5) masks and PPM (P6) overlay images.
//!
//! Masks are stored with maxval 255; a byte `b` reads back as probability
//! `b / 255`, and probabilities are written as `round(p * 255)`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::imagekit::{BinaryMask, GrayMask};

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    MaxVal(u32),
    #[error("truncated pixel data: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// Packed 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// Gray background built from a probability mask.
    pub fn from_mask(mask: &GrayMask) -> Self {
        let mut img = Self::new(mask.width(), mask.height());
        for (px, &p) in img.data.chunks_exact_mut(3).zip(mask.data()) {
            let g = quantize(p);
            px.copy_from_slice(&[g, g, g]);
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes a pixel; coordinates outside the canvas are ignored.
    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bresenham segment between two pixel positions, clipped to the canvas.
    pub fn draw_line(&mut self, from: (i64, i64), to: (i64, i64), rgb: [u8; 3]) {
        let (mut x0, mut y0) = from;
        let (x1, y1) = to;
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, rgb);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

#[inline]
pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm<W: Write>(mask: &GrayMask, mut w: W) -> Result<(), PnmError> {
    write!(w, "P5\n{} {}\n255\n", mask.width(), mask.height())?;
    let bytes: Vec<u8> = mask.data().iter().map(|&p| quantize(p)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_binary_pgm<W: Write>(mask: &BinaryMask, mut w: W) -> Result<(), PnmError> {
    write!(w, "P5\n{} {}\n255\n", mask.width(), mask.height())?;
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm<R: Read>(r: R) -> Result<GrayMask, PnmError> {
    let mut r = BufReader::new(r);
    let (width, height) = read_header(&mut r, "P5")?;
    let mut bytes = vec![0u8; width * height];
    read_pixels(&mut r, &mut bytes)?;
    let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    GrayMask::from_vec(width, height, data).map_err(|e| PnmError::Header(e.to_string()))
}

pub fn save_pgm(mask: &GrayMask, path: impl AsRef<Path>) -> Result<(), PnmError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm(mask, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayMask, PnmError> {
    read_pgm(File::open(path)?)
}

pub fn write_ppm<W: Write>(img: &RgbImage, mut w: W) -> Result<(), PnmError> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm<R: Read>(r: R) -> Result<RgbImage, PnmError> {
    let mut r = BufReader::new(r);
    let (width, height) = read_header(&mut r, "P6")?;
    let mut data = vec![0u8; width * height * 3];
    read_pixels(&mut r, &mut data)?;
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

pub fn save_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), PnmError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(img, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_pixels<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), PnmError> {
    let mut got = 0;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(PnmError::Truncated {
                expected: buf.len(),
                got,
            });
        }
        got += n;
    }
    Ok(())
}

/// Reads magic, width, height and maxval, honoring `#` comments. Exactly one
/// whitespace byte separates maxval from the raster.
fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<(usize, usize), PnmError> {
    let mut tokens = Vec::with_capacity(4);
    let mut cur = Vec::new();
    let mut in_comment = false;
    while tokens.len() < 4 {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Err(PnmError::Header("unexpected end of header".into()));
        }
        let c = byte[0];
        if in_comment {
            in_comment = c != b'\n';
            continue;
        }
        if c == b'#' && cur.is_empty() {
            in_comment = true;
        } else if c.is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(String::from_utf8_lossy(&cur).into_owned());
                cur.clear();
            }
        } else {
            cur.push(c);
        }
    }
    if tokens[0] != magic {
        return Err(PnmError::Header(format!(
            "expected magic {magic}, found {}",
            tokens[0]
        )));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| PnmError::Header(format!("invalid {what}: {s}")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")? as u32;
    if maxval != 255 {
        return Err(PnmError::MaxVal(maxval));
    }
    Ok((width, height))
}
