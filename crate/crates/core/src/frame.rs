//! Float RGB frames and single-channel region masks.

use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{ensure_len, Error, Result};

const RAW_MAGIC: &[u8; 4] = b"STFB";

/// `height × width` RGB image, row-major, channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FrameBuffer {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame size", format!("{width}x{height}")));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self::from_vec(width, height, data)
    }

    /// Values must lie in `[0, 1]`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame size", format!("{width}x{height}")));
        }
        ensure_len("frame data", width * height * 3, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("frame data", format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn from_vec_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_vec(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for k in 0..3 {
            self.data[i + k] = c[k].clamp(0.0, 1.0);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(to_u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.pixels().flat_map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::format(path, e))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Little-endian `f64` dump: magic, width, height (u32), then data.
    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + self.data.len() * 8);
        buf.extend_from_slice(RAW_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 12 || &buf[..4] != RAW_MAGIC {
            return Err(Error::format(path, "not a raw frame file"));
        }
        let w = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        let h = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        let body = &buf[12..];
        if body.len() != w * h * 3 * 8 {
            return Err(Error::format(path, "truncated raw frame"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_vec(w, h, data).map_err(|e| Error::format(path, e))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel weight in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RegionMask {
    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_vec(width, height, vec![value; width * height])
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask size", format!("{width}x{height}")));
        }
        ensure_len("mask data", width * height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("mask data", format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([to_u8(self.get(x as usize, y as usize))])
        })
        .save(path)
        .map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma8();
        let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        Self::from_vec(img.width() as usize, img.height() as usize, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(FrameBuffer::from_vec(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(RegionMask::from_vec(1, 1, vec![-0.1]).is_err());
        assert!(FrameBuffer::new(0, 3).is_err());
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f64 * 0.137).fract()).collect();
        let fb = FrameBuffer::from_vec(2, 3, data).unwrap();
        let p = dir.path().join("f.raw");
        fb.save_raw(&p).unwrap();
        assert_eq!(FrameBuffer::load_raw(&p).unwrap(), fb);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let fb = FrameBuffer::filled(4, 2, [0.1, 0.5, 0.9]).unwrap();
        let p = dir.path().join("f.png");
        fb.save_png(&p).unwrap();
        let back = FrameBuffer::load_png(&p).unwrap();
        for (a, b) in back.data().iter().zip(fb.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let m = RegionMask::from_fn(3, 3, |x, _| if x == 1 { 1.0 } else { 0.0 }).unwrap();
        let mp = dir.path().join("m.png");
        m.save_png(&mp).unwrap();
        assert_eq!(RegionMask::load_png(&mp).unwrap(), m);
    }
}
