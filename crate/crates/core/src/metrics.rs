//! PSNR, landmark distance and pose jitter.

use nalgebra::Vector2;

use crate::camera::HeadPose;
use crate::error::{ensure_len, Error, Result};
use crate::frame::FrameBuffer;

/// `10 log10(1 / MSE)` for unit-range images; `+∞` when identical.
pub fn psnr(pred: &FrameBuffer, target: &FrameBuffer) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::invalid(
            "psnr frame sizes",
            format!("{:?} vs {:?}", pred.dims(), target.dims()),
        ));
    }
    Ok(psnr_from_mse(mse(pred.data(), target.data())))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean Euclidean distance over all `(frame, landmark)` pairs.
pub fn lmd(a: &[Vec<Vector2<f64>>], b: &[Vec<Vector2<f64>>]) -> Result<f64> {
    ensure_len("landmark frames", a.len(), b.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.iter().zip(b) {
        ensure_len("landmarks per frame", fa.len(), fb.len())?;
        for (p, q) in fa.iter().zip(fb) {
            sum += (p - q).norm();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("landmark sets", "empty"));
    }
    Ok(sum / n as f64)
}

/// Quaternion and translation stacked into one 7-vector per frame, with
/// each quaternion sign-aligned to its predecessor.
pub fn pose_vectors(poses: &[HeadPose]) -> Vec<[f64; 7]> {
    let mut out: Vec<[f64; 7]> = Vec::with_capacity(poses.len());
    for p in poses {
        let mut q = p.wxyz();
        if let Some(prev) = out.last() {
            let dot: f64 = (0..4).map(|k| prev[k] * q[k]).sum();
            if dot < 0.0 {
                q = q.map(|v| -v);
            }
        }
        let t = p.translation;
        out.push([q[0], q[1], q[2], q[3], t.x, t.y, t.z]);
    }
    out
}

/// Mean norm of `p[t+1] − 2 p[t] + p[t−1]` over the sequence.
pub fn pose_jitter(poses: &[HeadPose]) -> Result<f64> {
    if poses.len() < 3 {
        return Err(Error::invalid("pose sequence", format!("{} frames < 3", poses.len())));
    }
    let v = pose_vectors(poses);
    let total: f64 = v
        .windows(3)
        .map(|w| (0..7).map(|k| (w[2][k] - 2.0 * w[1][k] + w[0][k]).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / (v.len() - 2) as f64)
}
