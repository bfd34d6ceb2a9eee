//! Compositing the rendered face into the original frame: blurred-mask
//! blending and neck-gap filling.

use crate::error::{Error, Result};
pub use crate::frame::{FrameBuffer, RegionMask};

/// Normalized 1-D Gaussian taps, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable blur of `channels` interleaved planes with clamp-to-edge.
fn blur_planes(data: &[f64], width: usize, height: usize, channels: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let xs = clamp(x as i64 + t as i64 - r, width);
                    acc += w * data[(y * width + xs) * channels + c];
                }
                tmp[(y * width + x) * channels + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let ys = clamp(y as i64 + t as i64 - r, height);
                    acc += w * tmp[(ys * width + x) * channels + c];
                }
                out[(y * width + x) * channels + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub trait Blur: Sized {
    fn gaussian_blur(&self, sigma: f64) -> Result<Self>;
}

impl Blur for FrameBuffer {
    fn gaussian_blur(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let (w, h) = self.dims();
        FrameBuffer::from_vec(w, h, blur_planes(self.data(), w, h, 3, sigma))
    }
}

impl Blur for RegionMask {
    fn gaussian_blur(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let (w, h) = self.dims();
        RegionMask::from_vec(w, h, blur_planes(self.data(), w, h, 1, sigma))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("blur sigma", sigma.to_string()))
    }
}

pub fn gaussian_blur<T: Blur>(img: &T, sigma: f64) -> Result<T> {
    img.gaussian_blur(sigma)
}

fn check_dims(what: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)))
    }
}

/// `m̃ ⊙ rendered + (1 − m̃) ⊙ original` with `m̃` the blurred face mask.
/// Pixels with `m̃ = 0` keep the original bits, `m̃ = 1` the rendered bits.
pub fn blend_face(rendered: &FrameBuffer, original: &FrameBuffer, face_mask: &RegionMask, sigma: f64) -> Result<FrameBuffer> {
    check_dims("blend frame sizes", rendered.dims(), original.dims())?;
    check_dims("blend mask size", rendered.dims(), face_mask.dims())?;
    let m = face_mask.gaussian_blur(sigma)?;
    let mut out = Vec::with_capacity(rendered.data().len());
    for (i, (r, o)) in rendered.pixels().zip(original.pixels()).enumerate() {
        let w = m.data()[i];
        for c in 0..3 {
            out.push(mix(r[c], o[c], w));
        }
    }
    let (w, h) = rendered.dims();
    FrameBuffer::from_vec(w, h, out)
}

/// `w·a + (1−w)·b`, exact at the endpoints and kept inside `[min, max]`.
fn mix(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        b
    } else if w == 1.0 {
        a
    } else {
        (w * a + (1.0 - w) * b).clamp(a.min(b), a.max(b))
    }
}

/// Weighted mean color over the neck region.
pub fn mean_neck_color(frame: &FrameBuffer, neck_mask: &RegionMask) -> Result<[f64; 3]> {
    check_dims("neck mask size", frame.dims(), neck_mask.dims())?;
    let total = neck_mask.total();
    if total <= 0.0 {
        return Err(Error::EmptyRegion("neck mask"));
    }
    let mut acc = [0.0; 3];
    for (p, &w) in frame.pixels().zip(neck_mask.data()) {
        for c in 0..3 {
            acc[c] += w * p[c];
        }
    }
    Ok(acc.map(|v| (v / total).clamp(0.0, 1.0)))
}

/// `g ⊙ C_n + (1 − g) ⊙ frame`; pixels with `g = 0` keep their bits.
pub fn fill_neck_gap(frame: &FrameBuffer, gap_mask: &RegionMask, neck_color: [f64; 3]) -> Result<FrameBuffer> {
    check_dims("gap mask size", frame.dims(), gap_mask.dims())?;
    let mut out = Vec::with_capacity(frame.data().len());
    for (p, &g) in frame.pixels().zip(gap_mask.data()) {
        for c in 0..3 {
            out.push(mix(neck_color[c], p[c], g));
        }
    }
    let (w, h) = frame.dims();
    FrameBuffer::from_vec(w, h, out)
}
