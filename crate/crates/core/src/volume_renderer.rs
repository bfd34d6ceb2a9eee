//! Ray generation and quadrature of the volume rendering integral.
//!
//! Each ray's `[t_near, t_far]` is split into `n` equal bins with one
//! sample per bin (bin midpoint, or a uniform jitter inside the bin). With
//! `δ_i = t_{i+1} - t_i` (the last one reaching `t_far`):
//!
//! ```text
//! α_i = 1 - exp(-σ_i δ_i)     T_0 = 1     T_{i+1} = T_i (1 - α_i)
//! w_i = T_i α_i               Ĉ = Σ w_i c_i + T_final · background
//! ```
//!
//! Samples after the transmittance drops below `early_stop` are dropped
//! from the sum; `T_final` is then the transmittance at the cut. When the
//! field carries an occupancy grid, samples in empty cells are treated as
//! `σ = 0` and never evaluated.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_direction, Aabb, CameraIntrinsics, HeadPose};
use crate::error::{Error, Result};
use crate::frame::{FrameBuffer, RegionMask};
use crate::radiance_field::{
    ColorPass, ConditioningFeatures, DensityPass, FieldGradients, RadianceField, UNIT_TOLERANCE,
};

/// Guards the depth normalization on empty rays.
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        let n = direction.norm();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::NonUnitDirection(n));
        }
        if !(t_near.is_finite() && t_far.is_finite() && t_near < t_far) {
            return Err(Error::invalid("ray bounds", format!("[{t_near}, {t_far}]")));
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Narrows the bounds to the part of the ray inside `bounds`.
    pub fn clip_to(&self, bounds: &Aabb) -> Option<Ray> {
        let (a, b) = bounds.intersect(&self.origin, &self.direction)?;
        let t_near = self.t_near.max(a);
        let t_far = self.t_far.min(b);
        (t_near < t_far).then_some(Ray {
            t_near,
            t_far,
            ..*self
        })
    }
}

/// One ray per pixel coordinate `(u, v)`, in head-local coordinates.
pub fn make_rays(
    intr: &CameraIntrinsics,
    pose: &HeadPose,
    pixels: &[(f64, f64)],
    depth_range: (f64, f64),
) -> Result<Vec<Ray>> {
    intr.validate()?;
    let origin = pose.camera_center();
    pixels
        .iter()
        .map(|&(u, v)| {
            Ray::new(
                origin,
                pixel_direction(intr, pose, u, v),
                depth_range.0,
                depth_range.1,
            )
        })
        .collect()
}

/// Pixel-center coordinates of a `width × height` image, row-major.
pub fn pixel_centers(width: usize, height: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push((x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// Bin midpoints.
    Midpoint,
    /// Uniform jitter inside each bin, seeded per ray from `(seed, key)`.
    Stratified { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub n_samples: usize,
    pub background: [f64; 3],
    pub sampling: Sampling,
    /// Transmittance below which remaining samples are skipped; 0 disables.
    pub early_stop: f64,
    /// Default ray bounds before clipping to the field's box.
    pub near: f64,
    pub far: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_samples: 128,
            background: [0.0; 3],
            sampling: Sampling::Midpoint,
            early_stop: 0.0,
            near: 0.0,
            far: 100.0,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::invalid("n_samples", format!("{} < 2", self.n_samples)));
        }
        if !(0.0..1.0).contains(&self.early_stop) {
            return Err(Error::invalid("early_stop", format!("{} outside [0, 1)", self.early_stop)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayOutput {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub transmittance: f64,
}

/// Per-sample quadrature record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSample {
    pub t: f64,
    pub delta: f64,
    pub density: f64,
    pub alpha: f64,
    /// Transmittance before this sample.
    pub transmittance: f64,
    pub weight: f64,
}

#[derive(Clone, Debug)]
struct RaySpan {
    /// Index of the first sample in the density pass.
    start: usize,
    /// Samples in occupied space.
    len: usize,
    /// Samples kept after early stopping; they occupy color rows
    /// `color_start..color_start + kept`.
    kept: usize,
    color_start: usize,
}

/// Forward state for a batch of rays sharing one conditioning vector.
#[derive(Debug)]
pub struct RenderTape {
    spans: Vec<Option<RaySpan>>,
    samples: Vec<RenderSample>,
    density: Option<DensityPass>,
    color: Option<ColorPass>,
    outputs: Vec<RayOutput>,
    background: [f64; 3],
}

impl RenderTape {
    pub fn outputs(&self) -> &[RayOutput] {
        &self.outputs
    }

    /// Quadrature records of ray `i` (only samples kept in the sum).
    pub fn samples(&self, i: usize) -> &[RenderSample] {
        match &self.spans[i] {
            Some(s) => &self.samples[s.start..s.start + s.kept],
            None => &[],
        }
    }
}

fn sample_offsets(n: usize, sampling: Sampling, key: u64) -> Vec<f64> {
    match sampling {
        Sampling::Midpoint => vec![0.5; n],
        Sampling::Stratified { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(key);
            (0..n).map(|_| rng.random::<f64>()).collect()
        }
    }
}

/// Forward pass over `rays`. Ray `i` draws its jitter from key `first_key + i`.
pub fn render_rays(
    field: &RadianceField,
    rays: &[Ray],
    cond: &ConditioningFeatures,
    opts: &RenderOptions,
    first_key: u64,
) -> Result<RenderTape> {
    opts.validate()?;
    cond.validate_for(field.config())?;
    let bounds = field.config().bounds;
    let occupancy = field.occupancy.as_ref();
    let n = opts.n_samples;

    let mut spans = Vec::with_capacity(rays.len());
    let mut positions = Vec::new();
    let mut samples = Vec::new();
    let mut clipped = Vec::with_capacity(rays.len());
    for (i, ray) in rays.iter().enumerate() {
        let Some(r) = ray.clip_to(&bounds) else {
            spans.push(None);
            clipped.push(None);
            continue;
        };
        let start = positions.len();
        let bin = (r.t_far - r.t_near) / n as f64;
        let offsets = sample_offsets(n, opts.sampling, first_key + i as u64);
        let ts: Vec<f64> = offsets
            .iter()
            .enumerate()
            .map(|(k, u)| r.t_near + (k as f64 + u) * bin)
            .collect();
        for k in 0..n {
            let next = if k + 1 < n { ts[k + 1] } else { r.t_far };
            let x = r.at(ts[k]);
            if occupancy.is_some_and(|g| !g.is_occupied(&x)) {
                continue;
            }
            positions.push(x);
            samples.push(RenderSample {
                t: ts[k],
                delta: next - ts[k],
                density: 0.0,
                alpha: 0.0,
                transmittance: 0.0,
                weight: 0.0,
            });
        }
        spans.push(Some(RaySpan {
            start,
            len: positions.len() - start,
            kept: 0,
            color_start: 0,
        }));
        clipped.push(Some(r));
    }

    let density = field.density_pass(positions);
    let mut color_rows = Vec::new();
    let mut color_dirs = Vec::new();
    for (span, ray) in spans.iter_mut().zip(&clipped) {
        let (Some(span), Some(ray)) = (span.as_mut(), ray) else {
            continue;
        };
        span.color_start = color_rows.len();
        let mut trans = 1.0;
        let mut kept = 0;
        for k in 0..span.len {
            if trans < opts.early_stop {
                break;
            }
            let idx = span.start + k;
            let sigma = density.density(idx);
            let s = &mut samples[idx];
            let alpha = 1.0 - (-sigma * s.delta).exp();
            s.density = sigma;
            s.alpha = alpha;
            s.transmittance = trans;
            s.weight = trans * alpha;
            trans *= 1.0 - alpha;
            color_rows.push(idx);
            color_dirs.push(ray.direction);
            kept += 1;
        }
        span.kept = kept;
    }
    let color = field.color_pass(&density, color_rows, &color_dirs, cond);

    let outputs = spans
        .iter()
        .map(|span| match span {
            None => RayOutput {
                color: opts.background,
                opacity: 0.0,
                depth: 0.0,
                transmittance: 1.0,
            },
            Some(span) => composite(span, &samples, &color, opts.background),
        })
        .collect();
    Ok(RenderTape {
        spans,
        samples,
        density: Some(density),
        color: Some(color),
        outputs,
        background: opts.background,
    })
}

fn composite(span: &RaySpan, samples: &[RenderSample], color: &ColorPass, bg: [f64; 3]) -> RayOutput {
    let mut c = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth = 0.0;
    let mut trans = 1.0;
    for k in 0..span.kept {
        let s = &samples[span.start + k];
        let rgb = color.color(span.color_start + k);
        for ch in 0..3 {
            c[ch] += s.weight * rgb[ch];
        }
        opacity += s.weight;
        depth += s.weight * s.t;
        trans = s.transmittance * (1.0 - s.alpha);
    }
    for ch in 0..3 {
        c[ch] += trans * bg[ch];
    }
    RayOutput {
        color: c,
        opacity,
        depth: depth / opacity.max(DEPTH_EPS),
        transmittance: trans,
    }
}

/// Gradients produced by [`render_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub field: FieldGradients,
    pub lip: Vec<f64>,
    pub expr: Vec<f64>,
}

/// Backpropagates per-ray upstream gradients on color and opacity into
/// `grads` (field parameters). Returns conditioning gradients.
pub fn render_backward(
    field: &RadianceField,
    tape: &RenderTape,
    d_color: &[[f64; 3]],
    d_opacity: &[f64],
    grads: &mut FieldGradients,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(d_color.len(), tape.outputs.len());
    assert_eq!(d_opacity.len(), tape.outputs.len());
    let density = tape.density.as_ref().expect("forward state");
    let color = tape.color.as_ref().expect("forward state");
    let mut d_sigma = vec![0.0; density.len()];
    let mut d_rgb = Array2::zeros((color.len(), 3));

    for (i, span) in tape.spans.iter().enumerate() {
        let Some(span) = span else { continue };
        let up = d_color[i];
        let out = &tape.outputs[i];
        // Suffix sum S_k = Σ_{j>k} w_j c_j + T_final bg, projected on `up`.
        let mut suffix = out.transmittance * dot3(&tape.background, &up);
        for k in (0..span.kept).rev() {
            let s = &tape.samples[span.start + k];
            let row = span.color_start + k;
            let rgb = color.color(row);
            let c_dot = dot3(&rgb, &up);
            for ch in 0..3 {
                d_rgb[[row, ch]] = s.weight * up[ch];
            }
            let t_next = s.transmittance * (1.0 - s.alpha);
            d_sigma[span.start + k] =
                s.delta * (t_next * c_dot - suffix) + d_opacity[i] * s.delta * out.transmittance;
            suffix += s.weight * c_dot;
        }
    }
    let inputs = field.backward(density, color, &d_sigma, &d_rgb, grads);
    (inputs.lip, inputs.expr)
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn render_ray(
    field: &RadianceField,
    ray: &Ray,
    cond: &ConditioningFeatures,
    opts: &RenderOptions,
) -> Result<RayOutput> {
    Ok(render_rays(field, std::slice::from_ref(ray), cond, opts, 0)?.outputs[0])
}

/// Gradients of `d_color · Ĉ + d_opacity · opacity` for one ray.
pub fn render_ray_backward(
    field: &RadianceField,
    ray: &Ray,
    cond: &ConditioningFeatures,
    opts: &RenderOptions,
    d_color: [f64; 3],
    d_opacity: f64,
) -> Result<RenderGradients> {
    let tape = render_rays(field, std::slice::from_ref(ray), cond, opts, 0)?;
    let mut grads = FieldGradients::zeros_like(field);
    let (lip, expr) = render_backward(field, &tape, &[d_color], &[d_opacity], &mut grads);
    Ok(RenderGradients {
        field: grads,
        lip,
        expr,
    })
}

/// Rays per forward chunk when rendering whole frames.
const FRAME_CHUNK: usize = 512;

/// Rendered color and accumulated opacity of a full frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub color: FrameBuffer,
    pub opacity: RegionMask,
}

/// Renders every pixel. Ray jitter keys are pixel indices, so the output
/// does not depend on how chunks are scheduled.
pub fn render_frame_full(
    field: &RadianceField,
    intr: &CameraIntrinsics,
    pose: &HeadPose,
    cond: &ConditioningFeatures,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<RenderedFrame> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("resolution", format!("{width}x{height}")));
    }
    opts.validate()?;
    let rays = make_rays(intr, pose, &pixel_centers(width, height), (opts.near, opts.far))?;
    let chunks: Vec<Vec<RayOutput>> = rays
        .par_chunks(FRAME_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            render_rays(field, chunk, cond, opts, (c * FRAME_CHUNK) as u64).map(|t| t.outputs)
        })
        .collect::<Result<_>>()?;
    let outputs: Vec<RayOutput> = chunks.into_iter().flatten().collect();
    let color = FrameBuffer::from_vec_clamped(
        width,
        height,
        outputs.iter().flat_map(|o| o.color).collect(),
    )?;
    let opacity = RegionMask::from_vec(
        width,
        height,
        outputs.iter().map(|o| o.opacity.clamp(0.0, 1.0)).collect(),
    )?;
    Ok(RenderedFrame { color, opacity })
}

pub fn render_frame(
    field: &RadianceField,
    intr: &CameraIntrinsics,
    pose: &HeadPose,
    cond: &ConditioningFeatures,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<FrameBuffer> {
    render_frame_full(field, intr, pose, cond, width, height, opts).map(|f| f.color)
}
