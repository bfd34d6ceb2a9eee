//! Pinhole camera model shared by pose estimation, ray generation and the
//! synthetic reference renderer.
//!
//! Conventions: camera looks down +Z, image `u` grows to the right and `v`
//! grows downward. A [`HeadPose`] maps head-local points into the camera
//! frame, `p_cam = R p + T`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64) -> Result<Self> {
        let intr = Self { focal, cx, cy };
        intr.validate()?;
        Ok(intr)
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, width as f64 / 2.0, height as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.focal > 0.0 && self.focal.is_finite() {
            Ok(())
        } else {
            Err(Error::NonPositiveFocal(self.focal))
        }
    }

    pub fn with_focal(&self, focal: f64) -> Self {
        Self { focal, ..*self }
    }
}

/// Rigid head pose. The rotation is stored as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadPose {
    rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for HeadPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl HeadPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw `[w, x, y, z]` quaternion components. The
    /// quaternion is normalized; a zero quaternion is rejected.
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = raw.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::invalid("quaternion", format!("{q:?} has norm {norm}")));
        }
        Ok(Self::new(
            UnitQuaternion::from_quaternion(raw),
            Vector3::from(translation),
        ))
    }

    /// Yaw (about y), pitch (about x), roll (about z) in radians, applied as
    /// `R = Ry * Rx * Rz`.
    pub fn from_euler_yxz(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        let ry = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
        let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll);
        Self::new(ry * rx * rz, translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn set_rotation(&mut self, rotation: UnitQuaternion<f64>) {
        self.rotation = rotation;
    }

    /// `R p + T`.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center expressed in head-local coordinates, `-Rᵀ T`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-multiplies the rotation by `exp(omega)` and renormalizes.
    pub fn perturb_rotation(&mut self, omega: &Vector3<f64>) {
        let delta = UnitQuaternion::from_scaled_axis(*omega);
        let q = (delta * self.rotation).into_inner();
        self.rotation = UnitQuaternion::new_normalize(q);
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &HeadPose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Projects a camera-frame point. Returns `None` for nonpositive depth.
pub fn project_camera_point(intr: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
    if p_cam.z <= 0.0 {
        return None;
    }
    Some(Vector2::new(
        intr.focal * p_cam.x / p_cam.z + intr.cx,
        intr.focal * p_cam.y / p_cam.z + intr.cy,
    ))
}

pub fn project_point(
    intr: &CameraIntrinsics,
    pose: &HeadPose,
    p: &Vector3<f64>,
) -> Option<Vector2<f64>> {
    project_camera_point(intr, &pose.transform_point(p))
}

/// Projects every point; points at nonpositive depth come back as `None`.
pub fn project(
    points: &[Vector3<f64>],
    intr: &CameraIntrinsics,
    pose: &HeadPose,
) -> Vec<Option<Vector2<f64>>> {
    points.iter().map(|p| project_point(intr, pose, p)).collect()
}

/// Unit ray direction in head-local coordinates through pixel `(u, v)`.
pub fn pixel_direction(intr: &CameraIntrinsics, pose: &HeadPose, u: f64, v: f64) -> Vector3<f64> {
    let d_cam = Vector3::new((u - intr.cx) / intr.focal, (v - intr.cy) / intr.focal, 1.0);
    (pose.rotation.inverse() * d_cam).normalize()
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [-0.5; 3],
            max: [0.5; 3],
        }
    }
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).all(|i| min[i] < max[i] && min[i].is_finite() && max[i].is_finite()) {
            Ok(Self { min, max })
        } else {
            Err(Error::invalid("bounding box", format!("min {min:?} max {max:?}")))
        }
    }

    /// Slab intersection. Returns the entry/exit parameters of the ray
    /// restricted to `t >= 0`, or `None` when the ray misses.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            // NaN arises for a zero direction component with the origin on a slab plane.
            if a.is_nan() || b.is_nan() {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Maps a point into `[0,1]^3`, clamping outside points to the box.
    /// The second value flags, per axis, whether the coordinate was inside.
    pub fn normalize(&self, p: &Vector3<f64>) -> ([f64; 3], [bool; 3]) {
        let mut out = [0.0; 3];
        let mut inside = [true; 3];
        for i in 0..3 {
            let t = (p[i] - self.min[i]) / (self.max[i] - self.min[i]);
            inside[i] = (0.0..=1.0).contains(&t);
            out[i] = t.clamp(0.0, 1.0);
        }
        (out, inside)
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }
}
