//! Grayscale images, binary masks and binary PGM I/O.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Dense row-major grid of finite intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height * width != pixels.len() || height == 0 || width == 0 {
            return Err(invalid!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        if let Some(p) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite pixel at index {p}")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, pixels: vec![v; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.width + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other)?;
        let pixels = self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { height: self.height, width: self.width, pixels })
    }

    pub fn clip01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_same(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(invalid!("image shape {:?} vs {:?}", self.dims(), other.dims()));
        }
        Ok(())
    }

    /// As a `[1,1,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone()).expect("consistent dims")
    }

    /// From any tensor whose last two extents are `H, W` and whose other
    /// extents are 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s.len() {
            0 | 1 => return Err(invalid!("tensor {s:?} is not an image")),
            n => (s[n - 2], s[n - 1]),
        };
        if h * w != t.len() {
            return Err(invalid!("tensor {s:?} holds more than one plane"));
        }
        Self::new(h, w, t.data().to_vec())
    }

    /// Writes a 16-bit binary PGM, mapping `[0,1]` linearly onto `[0,65535]`.
    pub fn write_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &v in &self.pixels {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads an 8- or 16-bit binary PGM into `[0,1]`.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        parse_pgm(&mut BufReader::new(f))
    }
}

fn pgm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(ch);
    }
    if tok.is_empty() {
        return Err(Error::Parse("truncated PGM header".into()));
    }
    Ok(tok)
}

fn parse_pgm(r: &mut impl BufRead) -> Result<Image> {
    if pgm_token(r)? != "P5" {
        return Err(Error::Parse("only binary (P5) PGM is supported".into()));
    }
    let num = |r: &mut _| -> Result<usize> {
        pgm_token(r)?.parse().map_err(|e| Error::Parse(format!("PGM header: {e}")))
    };
    let width = num(r)?;
    let height = num(r)?;
    let maxval = num(r)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("PGM maxval {maxval} out of range")));
    }
    let wide = maxval > 255;
    let mut raw = vec![0u8; width * height * if wide { 2 } else { 1 }];
    r.read_exact(&mut raw).map_err(|_| Error::Parse("PGM pixel data truncated".into()))?;
    let scale = maxval as f64;
    let pixels = if wide {
        raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale).collect()
    } else {
        raw.iter().map(|&b| b as f64 / scale).collect()
    };
    Image::new(height, width, pixels)
}

/// Binary observation mask: `true` marks an observed pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    observed: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, observed: Vec<bool>) -> Result<Self> {
        if height * width != observed.len() {
            return Err(invalid!("mask dims {height}x{width} vs {} entries", observed.len()));
        }
        Ok(Self { height, width, observed })
    }

    pub fn all(height: usize, width: usize, observed: bool) -> Self {
        Self { height, width, observed: vec![observed; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut observed = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                observed.push(f(r, c));
            }
        }
        Self { height, width, observed }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn count_observed(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    /// 1.0 where observed, 0.0 where occluded.
    pub fn weights(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.observed.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Thresholds an image at one half.
    pub fn from_image(img: &Image) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            observed: img.pixels().iter().map(|&v| v >= 0.5).collect(),
        }
    }

    /// Writes an 8-bit PGM with 255 for observed and 0 for occluded.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.observed.iter().map(|&b| if b { 255u8 } else { 0 }));
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_image(&Image::read_pgm(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(Image::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn pgm16_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Image::from_fn(5, 7, |r, c| (r * 7 + c) as f64 / 34.0);
        img.write_pgm16(&p).unwrap();
        let back = Image::read_pgm(&p).unwrap();
        assert_eq!(back.dims(), (5, 7));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn mask_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = Mask::from_fn(4, 6, |r, c| (r + c) % 3 != 0);
        m.write_pgm(&p).unwrap();
        assert_eq!(Mask::read_pgm(&p).unwrap(), m);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut data = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        data.extend([0u8, 255]);
        let img = parse_pgm(&mut &data[..]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(3, 2, |r, c| (r + 2 * c) as f64);
        assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
    }
}
