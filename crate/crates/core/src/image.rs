//! Image containers and binary Netpbm (P5/P6) encoding.

use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, row-major `H×W×3`, channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        RgbImage { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest multiple of 1/255, the grid an 8-bit
    /// file can store exactly.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// Per-pixel category map; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self, category: u8) -> usize {
        self.data.iter().filter(|&&v| v == category).count()
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM bytes: `P6\n<w> <h>\n255\n` followed by RGB triples.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v)));
    out
}

/// Binary PGM bytes: `P5\n<w> <h>\n<maxval>\n` followed by one byte per pixel.
pub fn encode_pgm(width: usize, height: usize, maxval: u8, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parsed Netpbm header plus a view of the raster bytes.
struct Pnm<'a> {
    width: usize,
    height: usize,
    maxval: usize,
    raster: &'a [u8],
}

fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<Pnm<'a>, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("bad magic number, expected {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("truncated or non-numeric header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header value out of range")?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after max value".into()),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported max value {maxval}"));
    }
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(format!("expected {expected} raster bytes, found {}", raster.len()));
    }
    Ok(Pnm { width, height, maxval, raster })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let pnm = parse_pnm(bytes, b"P6", 3).map_err(|m| Error::format(path, m))?;
    let scale = pnm.maxval as f64;
    Ok(RgbImage {
        height: pnm.height,
        width: pnm.width,
        data: pnm.raster.iter().map(|&b| b as f64 / scale).collect(),
    })
}

/// Returns `(width, height, maxval, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, u8, Vec<u8>)> {
    let pnm = parse_pnm(bytes, b"P5", 1).map_err(|m| Error::format(path, m))?;
    Ok((pnm.width, pnm.height, pnm.maxval as u8, pnm.raster.to_vec()))
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Writes a mask as PGM with max value `k`; values above `k` are rejected.
pub fn write_mask(mask: &Mask, k: u8, path: &Path) -> Result<()> {
    if let Some(&v) = mask.data.iter().find(|&&v| v > k) {
        return Err(Error::Data(format!("mask value {v} exceeds category count {k}")));
    }
    std::fs::write(path, encode_pgm(mask.width, mask.height, k, &mask.data)).map_err(|e| Error::io(path, e))
}

/// Reads a mask PGM, returning the mask and its declared max value.
pub fn read_mask(path: &Path) -> Result<(Mask, u8)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, data) = decode_pgm(&bytes, path)?;
    if let Some(&v) = data.iter().find(|&&v| v > maxval) {
        return Err(Error::format(path, format!("pixel value {v} above max value {maxval}")));
    }
    Ok((Mask { height, width, data }, maxval))
}
