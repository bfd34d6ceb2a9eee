//! Analytic animated head scenes: ground-truth poses, landmarks,
//! conditioning signals and ray-traced reference frames.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_direction, project_point, CameraIntrinsics, HeadPose};
use crate::error::{Error, Result};
use crate::face_sync::{blendshape_index, BlendshapeCoeffs, ConditioningPipeline};
use crate::frame::{FrameBuffer, RegionMask};
use crate::head_sync::{KeypointTracks, LandmarkTemplate};
use crate::trainer::TrainingSample;
use crate::volume_renderer::pixel_centers;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    Cuboid { center: [f64; 3], half_extent: [f64; 3] },
}

impl Shape {
    /// Nearest positive hit distance along a unit ray.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Ellipsoid { center, radii } => {
                let r = Vector3::from(radii);
                let oc = (o - Vector3::from(center)).component_div(&r);
                let dd = d.component_div(&r);
                let a = dd.norm_squared();
                let b = oc.dot(&dd);
                let c = oc.norm_squared() - 1.0;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = (-b - s) / a;
                let t1 = (-b + s) / a;
                [t0, t1].into_iter().find(|&t| t > 0.0)
            }
            Shape::Cuboid { center, half_extent } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for k in 0..3 {
                    let lo = center[k] - half_extent[k];
                    let hi = center[k] + half_extent[k];
                    if d[k] == 0.0 {
                        if o[k] < lo || o[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    None
                } else {
                    [t0, t1].into_iter().find(|&t| t > 0.0)
                }
            }
        }
    }

    /// Corners of the bounding box.
    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        let (c, h) = match *self {
            Shape::Ellipsoid { center, radii } => (center, radii),
            Shape::Cuboid { center, half_extent } => (center, half_extent),
        };
        (
            [c[0] - h[0], c[1] - h[1], c[2] - h[2]],
            [c[0] + h[0], c[1] + h[1], c[2] + h[2]],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Head,
    Eye,
    /// Color follows the lip signal.
    Lip,
    /// Color follows the expression signal.
    Brow,
    Neck,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub role: Role,
    /// Color at signal 0.
    pub color: [f64; 3],
    /// Color at signal 1 (driven primitives only).
    pub active_color: [f64; 3],
}

impl Primitive {
    fn fixed(shape: Shape, role: Role, color: [f64; 3]) -> Self {
        Self {
            shape,
            role,
            color,
            active_color: color,
        }
    }

    pub fn color_at(&self, lip: f64, expr: f64) -> [f64; 3] {
        let s = match self.role {
            Role::Lip => lip,
            Role::Brow => expr,
            _ => 0.0,
        };
        std::array::from_fn(|k| self.color[k] + s * (self.active_color[k] - self.color[k]))
    }
}

/// Generator parameters. Angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub distance: f64,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub translation_amplitude: [f64; 3],
    /// Frames per full pose oscillation.
    pub period: f64,
    /// Per-frame trajectory noise.
    pub rotation_noise_deg: f64,
    pub translation_noise: f64,
    pub lip_period: f64,
    pub expr_period: f64,
    pub background: [f64; 3],
    pub lip_width: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 60,
            width: 64,
            height: 64,
            focal: 72.0,
            distance: 1.5,
            yaw_deg: 18.0,
            pitch_deg: 8.0,
            roll_deg: 5.0,
            translation_amplitude: [0.03, 0.02, 0.04],
            period: 60.0,
            rotation_noise_deg: 0.0,
            translation_noise: 0.0,
            lip_period: 7.3,
            expr_period: 17.9,
            background: [0.35, 0.4, 0.45],
            lip_width: 32,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, r: String| Err(Error::Config { key: k.into(), reason: r });
        if self.frames < 2 {
            return bad("frames", format!("{} < 2", self.frames));
        }
        if self.width == 0 || self.height == 0 {
            return bad("width", "image size must be positive".into());
        }
        if !(self.focal > 0.0) {
            return bad("focal", format!("{} is not positive", self.focal));
        }
        if !(self.distance > 0.9) {
            return bad("distance", "camera must stay outside the head box".into());
        }
        for (k, v) in [("yaw_deg", self.yaw_deg), ("pitch_deg", self.pitch_deg), ("roll_deg", self.roll_deg)] {
            if !(v.abs() < 45.0) {
                return bad(k, format!("amplitude {v} must be below 45 degrees"));
            }
        }
        for (k, v) in [("period", self.period), ("lip_period", self.lip_period), ("expr_period", self.expr_period)] {
            if !(v > 0.0) {
                return bad(k, format!("{v} is not positive"));
            }
        }
        if self.rotation_noise_deg < 0.0 || self.translation_noise < 0.0 {
            return bad("rotation_noise_deg", "noise must be nonnegative".into());
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background", "channels must lie in [0, 1]".into());
        }
        if self.lip_width == 0 {
            return bad("lip_width", "must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub primitives: Vec<Primitive>,
    pub trajectory: Vec<HeadPose>,
    pub landmarks: Vec<Vector3<f64>>,
    pub intr: CameraIntrinsics,
    pub lip_signal: Vec<f64>,
    pub expr_signal: Vec<f64>,
    /// Unit direction scaled by the lip signal to form lip features.
    pub lip_basis: Vec<f64>,
}

const HEAD_RADII: [f64; 3] = [0.28, 0.36, 0.28];

pub fn default_primitives() -> Vec<Primitive> {
    let ell = |c: [f64; 3], r: [f64; 3]| Shape::Ellipsoid { center: c, radii: r };
    vec![
        Primitive::fixed(ell([0.0, 0.0, 0.0], HEAD_RADII), Role::Head, [0.82, 0.64, 0.52]),
        Primitive::fixed(ell([-0.1, -0.08, -0.25], [0.05; 3]), Role::Eye, [0.12, 0.12, 0.18]),
        Primitive::fixed(ell([0.1, -0.08, -0.25], [0.05; 3]), Role::Eye, [0.12, 0.12, 0.18]),
        Primitive {
            shape: ell([0.0, 0.16, -0.22], [0.1, 0.035, 0.05]),
            role: Role::Lip,
            color: [0.55, 0.18, 0.22],
            active_color: [0.95, 0.5, 0.55],
        },
        Primitive {
            shape: Shape::Cuboid {
                center: [0.0, -0.17, -0.24],
                half_extent: [0.14, 0.02, 0.04],
            },
            role: Role::Brow,
            color: [0.45, 0.3, 0.2],
            active_color: [0.15, 0.08, 0.05],
        },
        Primitive::fixed(ell([0.0, 0.38, 0.02], [0.12, 0.11, 0.12]), Role::Neck, [0.72, 0.55, 0.44]),
    ]
}

/// 68 points on the front of the head ellipsoid (17 columns × 4 rows).
pub fn default_landmarks() -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(68);
    for row in 0..4 {
        let elev = (-40.0 + 80.0 * row as f64 / 3.0).to_radians();
        for col in 0..17 {
            let az = (-60.0 + 120.0 * col as f64 / 16.0).to_radians();
            out.push(Vector3::new(
                HEAD_RADII[0] * az.sin() * elev.cos(),
                HEAD_RADII[1] * elev.sin(),
                -HEAD_RADII[2] * az.cos() * elev.cos(),
            ));
        }
    }
    out
}

/// Smooth pose at (possibly fractional) frame `t`, without noise.
pub fn trajectory_pose(spec: &SceneSpec, t: f64) -> HeadPose {
    let w = 2.0 * PI / spec.period;
    let a = spec.translation_amplitude;
    HeadPose::from_euler_yxz(
        spec.yaw_deg.to_radians() * (w * t).sin(),
        spec.pitch_deg.to_radians() * (w * t + 0.9).sin(),
        spec.roll_deg.to_radians() * (w * t + 2.1).sin(),
        Vector3::new(
            a[0] * (w * t + 0.4).sin(),
            a[1] * (w * t + 1.7).sin(),
            spec.distance + a[2] * (w * t + 2.8).sin(),
        ),
    )
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot_noise = Normal::new(0.0, spec.rotation_noise_deg.to_radians()).expect("finite sigma");
    let trans_noise = Normal::new(0.0, spec.translation_noise).expect("finite sigma");
    let trajectory = (0..spec.frames)
        .map(|t| {
            let mut p = trajectory_pose(spec, t as f64);
            if spec.rotation_noise_deg > 0.0 {
                let w = Vector3::from_fn(|_, _| rot_noise.sample(&mut rng));
                p.perturb_rotation(&w);
            }
            if spec.translation_noise > 0.0 {
                p.translation += Vector3::from_fn(|_, _| trans_noise.sample(&mut rng));
            }
            p
        })
        .collect();
    let signal = |period: f64, phase: f64| -> Vec<f64> {
        (0..spec.frames)
            .map(|t| 0.5 + 0.5 * (2.0 * PI * t as f64 / period + phase).sin())
            .collect()
    };
    let raw: Vec<f64> = (0..spec.lip_width).map(|k| (0.7 * k as f64 + 0.3).cos()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(SyntheticScene {
        spec: spec.clone(),
        primitives: default_primitives(),
        trajectory,
        landmarks: default_landmarks(),
        intr: CameraIntrinsics::centered(spec.focal, spec.width, spec.height)?,
        lip_signal: signal(spec.lip_period, 0.0),
        expr_signal: signal(spec.expr_period, 1.0),
        lip_basis: raw.into_iter().map(|v| v / norm).collect(),
    })
}

/// Rendered frame with region masks from primitive hit tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFrame {
    pub image: FrameBuffer,
    pub face_mask: RegionMask,
    pub neck_mask: RegionMask,
    /// Pixels whose first hit is the lip primitive.
    pub lip_mask: RegionMask,
}

impl SyntheticScene {
    pub fn template(&self) -> LandmarkTemplate {
        LandmarkTemplate::new(self.landmarks.clone()).expect("default landmarks are spread")
    }

    pub fn lip_features(&self, frame: usize) -> Vec<f64> {
        let s = self.lip_signal[frame];
        self.lip_basis.iter().map(|b| b * s).collect()
    }

    /// All zeros except `browInnerUp`, which carries the expression signal.
    pub fn blendshapes(&self, frame: usize) -> BlendshapeCoeffs {
        let mut v = vec![0.0; 52];
        v[blendshape_index("browInnerUp").expect("known name")] = self.expr_signal[frame];
        BlendshapeCoeffs::new(v).expect("signal in [0, 1]")
    }

    /// Ray-traced frame with explicit signals and pose.
    pub fn render_with(&self, pose: &HeadPose, lip: f64, expr: f64, width: usize, height: usize) -> Result<ReferenceFrame> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("resolution", format!("{width}x{height}")));
        }
        let intr = self.intr_at(width, height)?;
        let origin = pose.camera_center();
        let hits: Vec<Option<usize>> = pixel_centers(width, height)
            .par_iter()
            .map(|&(u, v)| {
                let d = pixel_direction(&intr, pose, u, v);
                let mut best: Option<(f64, usize)> = None;
                for (i, p) in self.primitives.iter().enumerate() {
                    if let Some(t) = p.shape.intersect(&origin, &d) {
                        if best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, i));
                        }
                    }
                }
                best.map(|(_, i)| i)
            })
            .collect();
        let mut image = Vec::with_capacity(width * height * 3);
        let mut face = Vec::with_capacity(width * height);
        let mut neck = Vec::with_capacity(width * height);
        let mut lipm = Vec::with_capacity(width * height);
        for h in &hits {
            let role = h.map(|i| self.primitives[i].role);
            let c = h.map_or(self.spec.background, |i| self.primitives[i].color_at(lip, expr));
            image.extend_from_slice(&c);
            let is = |r: Role| if role == Some(r) { 1.0 } else { 0.0 };
            face.push(if matches!(role, Some(Role::Neck) | None) { 0.0 } else { 1.0 });
            neck.push(is(Role::Neck));
            lipm.push(is(Role::Lip));
        }
        Ok(ReferenceFrame {
            image: FrameBuffer::from_vec(width, height, image)?,
            face_mask: RegionMask::from_vec(width, height, face)?,
            neck_mask: RegionMask::from_vec(width, height, neck)?,
            lip_mask: RegionMask::from_vec(width, height, lipm)?,
        })
    }

    /// Intrinsics rescaled to another resolution.
    pub fn intr_at(&self, width: usize, height: usize) -> Result<CameraIntrinsics> {
        let s = width as f64 / self.spec.width as f64;
        CameraIntrinsics::new(self.intr.focal * s, width as f64 / 2.0, height as f64 / 2.0)
    }

    /// Ground-truth frame `frame` at the given resolution.
    pub fn reference_render(&self, frame: usize, width: usize, height: usize) -> Result<ReferenceFrame> {
        if frame >= self.trajectory.len() {
            return Err(Error::invalid("frame index", format!("{frame} >= {}", self.trajectory.len())));
        }
        self.render_with(&self.trajectory[frame], self.lip_signal[frame], self.expr_signal[frame], width, height)
    }

    /// Ground-truth frames with true poses and conditioning from `pipeline`.
    pub fn training_samples(&self, width: usize, height: usize, pipeline: &ConditioningPipeline) -> Result<Vec<TrainingSample>> {
        let intr = self.intr_at(width, height)?;
        (0..self.trajectory.len())
            .map(|i| {
                Ok(TrainingSample {
                    frame: self.reference_render(i, width, height)?.image,
                    pose: self.trajectory[i],
                    intr,
                    cond: pipeline.features(&self.lip_features(i), &self.blendshapes(i))?,
                })
            })
            .collect()
    }

    /// Smallest box (centered at the origin) holding every primitive.
    pub fn half_extent(&self) -> f64 {
        self.primitives
            .iter()
            .flat_map(|p| {
                let (lo, hi) = p.shape.extent();
                lo.into_iter().chain(hi).map(f64::abs)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackNoise {
    pub pixel_sigma: f64,
    pub rotation_deg: f64,
    pub translation: f64,
}

impl Default for TrackNoise {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            rotation_deg: 0.0,
            translation: 0.0,
        }
    }
}

/// Landmark tracks with Gaussian pixel noise and rough poses (ground truth
/// perturbed by Gaussian rotation and translation noise).
pub fn emit_tracks(scene: &SyntheticScene, noise: &TrackNoise, seed: u64) -> Result<(KeypointTracks, Vec<HeadPose>)> {
    if noise.pixel_sigma < 0.0 || noise.rotation_deg < 0.0 || noise.translation < 0.0 {
        return Err(Error::invalid("track noise", format!("{noise:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = Normal::new(0.0, noise.pixel_sigma).expect("finite sigma");
    let rot = Normal::new(0.0, noise.rotation_deg.to_radians()).expect("finite sigma");
    let trans = Normal::new(0.0, noise.translation).expect("finite sigma");
    let (w, h) = (scene.spec.width as f64, scene.spec.height as f64);
    let mut frames = Vec::with_capacity(scene.trajectory.len());
    let mut valid = Vec::with_capacity(scene.trajectory.len());
    for pose in &scene.trajectory {
        let mut pts = Vec::with_capacity(scene.landmarks.len());
        let mut ok = Vec::with_capacity(scene.landmarks.len());
        for p in &scene.landmarks {
            let (du, dv) = if noise.pixel_sigma > 0.0 {
                (px.sample(&mut rng), px.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            match project_point(&scene.intr, pose, p) {
                Some(uv) => {
                    let q = [uv.x + du, uv.y + dv];
                    ok.push(q[0] >= 0.0 && q[0] <= w && q[1] >= 0.0 && q[1] <= h);
                    pts.push(q);
                }
                None => {
                    ok.push(false);
                    pts.push([0.0, 0.0]);
                }
            }
        }
        frames.push(pts);
        valid.push(ok);
    }
    let rough = scene
        .trajectory
        .iter()
        .map(|pose| {
            let mut p = *pose;
            if noise.rotation_deg > 0.0 {
                p.perturb_rotation(&Vector3::from_fn(|_, _| rot.sample(&mut rng)));
            }
            if noise.translation > 0.0 {
                p.translation += Vector3::from_fn(|_, _| trans.sample(&mut rng));
            }
            p
        })
        .collect();
    Ok((
        KeypointTracks {
            frames,
            valid,
            image_size: [scene.spec.width, scene.spec.height],
        },
        rough,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_reproducible_and_bounded() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 3).unwrap();
        assert_eq!(a, generate_scene(&spec, 3).unwrap());
        assert!(a.half_extent() <= 0.5);
        assert!(a.landmarks.len() >= 8);
    }

    #[test]
    fn zero_amplitude_gives_constant_pose() {
        let spec = SceneSpec {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            translation_amplitude: [0.0; 3],
            ..Default::default()
        };
        let s = generate_scene(&spec, 0).unwrap();
        assert!(s.trajectory.iter().all(|p| *p == s.trajectory[0]));
    }

    #[test]
    fn rejects_invalid_specs() {
        for spec in [
            SceneSpec { frames: 1, ..Default::default() },
            SceneSpec { yaw_deg: 50.0, ..Default::default() },
            SceneSpec { focal: 0.0, ..Default::default() },
        ] {
            assert!(generate_scene(&spec, 0).is_err());
        }
    }

    #[test]
    fn translation_second_difference_matches_sinusoid() {
        let spec = SceneSpec::default();
        let s = generate_scene(&spec, 0).unwrap();
        let w = 2.0 * PI / spec.period;
        let k = -4.0 * (w / 2.0).sin().powi(2);
        for t in 1..spec.frames - 1 {
            let d2 = s.trajectory[t + 1].translation - 2.0 * s.trajectory[t].translation + s.trajectory[t - 1].translation;
            let want = spec.translation_amplitude[0] * (w * t as f64 + 0.4).sin() * k;
            assert_close!(d2.x, want, 1e-12);
        }
    }

    #[test]
    fn empty_geometry_renders_background() {
        let mut s = generate_scene(&SceneSpec::default(), 0).unwrap();
        s.primitives.clear();
        let r = s.reference_render(0, 16, 16).unwrap();
        assert!(r.image.pixels().all(|p| p == s.spec.background));
        assert_eq!(r.face_mask.total(), 0.0);
    }

    #[test]
    fn noiseless_tracks_are_exact_projections() {
        let s = generate_scene(&SceneSpec::default(), 0).unwrap();
        let (tracks, rough) = emit_tracks(&s, &TrackNoise::default(), 0).unwrap();
        assert_eq!(rough, s.trajectory);
        let uv = project_point(&s.intr, &s.trajectory[5], &s.landmarks[7]).unwrap();
        assert_eq!(tracks.frames[5][7], [uv.x, uv.y]);
        assert!(tracks.valid.iter().flatten().all(|&v| v));
    }

    #[test]
    fn landmarks_behind_camera_are_invalid() {
        let mut s = generate_scene(&SceneSpec::default(), 0).unwrap();
        s.landmarks[0] = Vector3::new(0.0, 0.0, -5.0);
        let (tracks, _) = emit_tracks(&s, &TrackNoise::default(), 0).unwrap();
        assert!(tracks.valid.iter().all(|f| !f[0]));
    }
}
