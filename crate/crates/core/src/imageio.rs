//! Binary netpbm I/O: PPM (P6) for images, PGM (P5) for masks and heatmaps.
//! Only 8-bit files (maxval 255) are produced; readers accept any maxval up
//! to 255.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed netpbm file: {0}")]
    Format(String),
    #[error("expected a {expected}-channel tensor, got {got}")]
    Channels { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An 8-bit single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count must match dimensions");
        Self { height, width, pixels }
    }

    /// 0/255 rendering of a boolean mask.
    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Self {
        Self::new(height, width, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
    }

    pub fn to_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p > 127).collect()
    }
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String, ImageError> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    break;
                }
            }
            b => token.push(b),
        }
    }
    if token.is_empty() {
        return Err(ImageError::Format("unexpected end of header".into()));
    }
    String::from_utf8(token).map_err(|_| ImageError::Format("non-ASCII header".into()))
}

fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<(usize, usize, u32), ImageError> {
    let m = read_token(r)?;
    if m != magic {
        return Err(ImageError::Format(format!("expected {magic}, found {m}")));
    }
    let mut num = || -> Result<usize, ImageError> {
        let t = read_token(r)?;
        t.parse().map_err(|_| ImageError::Format(format!("bad header field {t:?}")))
    };
    let width = num()?;
    let height = num()?;
    let maxval = num()?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Format(format!("unsupported maxval {maxval}")));
    }
    Ok((height, width, maxval as u32))
}

/// Writes a 3-channel tensor with values in `[0, 1]` as P6.
pub fn write_ppm<W: Write>(mut w: W, image: &Tensor) -> Result<(), ImageError> {
    let shape = image.shape();
    if shape.channels != 3 {
        return Err(ImageError::Channels { expected: 3, got: shape.channels });
    }
    write!(w, "P6\n{} {}\n255\n", shape.width, shape.height)?;
    let mut bytes = Vec::with_capacity(shape.len());
    for r in 0..shape.height {
        for c in 0..shape.width {
            for ch in 0..3 {
                bytes.push(to_byte(image.get(ch, r, c)));
            }
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a P6 file into a 3-channel tensor scaled to `[0, 1]`.
pub fn read_ppm<R: Read>(r: R) -> Result<Tensor, ImageError> {
    let mut r = BufReader::new(r);
    let (height, width, maxval) = read_header(&mut r, "P6")?;
    let mut bytes = vec![0u8; height * width * 3];
    r.read_exact(&mut bytes)?;
    let mut image = Tensor::zeros(Shape::image(3, height, width));
    let scale = maxval as f64;
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            image.set(ch, i / width, i % width, b as f64 / scale);
        }
    }
    Ok(image)
}

pub fn write_pgm<W: Write>(mut w: W, image: &GrayImage) -> Result<(), ImageError> {
    write!(w, "P5\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&image.pixels)?;
    Ok(())
}

pub fn read_pgm<R: Read>(r: R) -> Result<GrayImage, ImageError> {
    let mut r = BufReader::new(r);
    let (height, width, maxval) = read_header(&mut r, "P5")?;
    let mut pixels = vec![0u8; height * width];
    r.read_exact(&mut pixels)?;
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as u32 * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Ok(GrayImage::new(height, width, pixels))
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<(), ImageError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(&mut w, image)?;
    w.flush()?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor, ImageError> {
    read_ppm(std::fs::File::open(path)?)
}

pub fn save_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<(), ImageError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(&mut w, image)?;
    w.flush()?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    read_pgm(std::fs::File::open(path)?)
}

/// Renders a nonnegative map with 0 as black and the maximum as white.
pub fn heatmap(values: &[f64], height: usize, width: usize) -> GrayImage {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let pixels = values
        .iter()
        .map(|&v| if max > 0.0 { to_byte((v / max).max(0.0)) } else { 0 })
        .collect();
    GrayImage::new(height, width, pixels)
}

/// Renders a signed map with 0 at mid-gray (128), scaled by the largest
/// magnitude.
pub fn signed_heatmap(values: &[f64], height: usize, width: usize) -> GrayImage {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pixels = values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (128.0 + 127.0 * v / max).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect();
    GrayImage::new(height, width, pixels)
}
