//! Head-pose stabilization: landmark fitting, focal search and two-stage
//! bundle adjustment over tracked keypoints.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project_camera_point, CameraIntrinsics, HeadPose};
use crate::error::{ensure_len, Error, Result};
use crate::optim::{AdamConfig, AdamW, GroupRate};

/// Observed 2D keypoints per frame with a validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointTracks {
    pub frames: Vec<Vec<[f64; 2]>>,
    pub valid: Vec<Vec<bool>>,
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
}

impl KeypointTracks {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_points(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_len("track validity frames", self.frames.len(), self.valid.len())?;
        let j = self.num_points();
        let [w, h] = self.image_size;
        for (f, (pts, ok)) in self.frames.iter().zip(&self.valid).enumerate() {
            ensure_len("keypoints per frame", j, pts.len())?;
            ensure_len("validity per frame", j, ok.len())?;
            for (k, (p, &v)) in pts.iter().zip(ok).enumerate() {
                if v && !(p[0] >= 0.0 && p[0] <= w as f64 && p[1] >= 0.0 && p[1] <= h as f64) {
                    return Err(Error::invalid(
                        "keypoint tracks",
                        format!("frame {f} point {k} at {p:?} lies outside {w}x{h}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn observation(&self, frame: usize, point: usize) -> Option<Vector2<f64>> {
        self.valid[frame][point].then(|| Vector2::from(self.frames[frame][point]))
    }
}

/// Rigid 3D landmark template in head-local coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkTemplate {
    pub points: Vec<[f64; 3]>,
}

impl LandmarkTemplate {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        let t = Self {
            points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn vectors(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| Vector3::from(*p)).collect()
    }

    /// Rejects templates with fewer than 4 points or a collinear spread.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 4 {
            return Err(Error::invalid("landmark template", format!("{} points < 4", self.points.len())));
        }
        let pts = self.vectors();
        let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let cov = pts.iter().fold(Matrix3::zeros(), |acc, p| {
            let d = p - mean;
            acc + d * d.transpose()
        });
        let mut sv: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if !(sv[0] > 0.0 && sv[1] > 1e-9 * sv[0]) {
            return Err(Error::invalid("landmark template", "points are collinear or coincident"));
        }
        Ok(())
    }
}

/// Mean squared pixel distance over valid landmarks that project in front
/// of the camera.
pub fn landmark_error(observed: &[[f64; 2]], projected: &[Option<Vector2<f64>>], valid: &[bool]) -> Result<f64> {
    ensure_len("projected landmarks", observed.len(), projected.len())?;
    ensure_len("landmark validity", observed.len(), valid.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((o, p), &v) in observed.iter().zip(projected).zip(valid) {
        if let (true, Some(p)) = (v, p) {
            sum += (p - Vector2::from(*o)).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("landmark set"));
    }
    Ok(sum / n as f64)
}

/// Derivative of the projection with respect to the camera-frame point.
fn projection_jacobian(intr: &CameraIntrinsics, x: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    let f = intr.focal;
    Matrix2x3::new(f * iz, 0.0, -f * x.x * iz * iz, 0.0, f * iz, -f * x.y * iz * iz)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseFitConfig {
    pub max_iters: usize,
    /// Frames whose final error (px²) exceeds this are reported unconverged.
    pub error_threshold: f64,
}

impl Default for PoseFitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            error_threshold: 25.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseFit {
    pub pose: HeadPose,
    pub initial_error: f64,
    pub error: f64,
    pub converged: bool,
}

fn frame_error(obs: &[[f64; 2]], valid: &[bool], template: &[Vector3<f64>], intr: &CameraIntrinsics, pose: &HeadPose) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((o, &v), p) in obs.iter().zip(valid).zip(template) {
        if !v {
            continue;
        }
        match project_camera_point(intr, &pose.transform_point(p)) {
            Some(uv) => sum += (uv - Vector2::from(*o)).norm_squared(),
            None => return f64::INFINITY,
        }
        n += 1;
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Identity rotation, depth from the ratio of template and image spreads,
/// lateral offset from the image centroid.
pub fn initial_pose(obs: &[[f64; 2]], valid: &[bool], template: &[Vector3<f64>], intr: &CameraIntrinsics) -> HeadPose {
    let sel: Vec<usize> = (0..obs.len()).filter(|&k| valid[k]).collect();
    let n = sel.len().max(1) as f64;
    let pm = sel.iter().map(|&k| template[k]).sum::<Vector3<f64>>() / n;
    let om = sel.iter().map(|&k| Vector2::from(obs[k])).sum::<Vector2<f64>>() / n;
    let spread_t = (sel.iter().map(|&k| (template[k] - pm).xy().norm_squared()).sum::<f64>() / n).sqrt();
    let spread_o = (sel.iter().map(|&k| (Vector2::from(obs[k]) - om).norm_squared()).sum::<f64>() / n).sqrt();
    let depth = if spread_o > 0.0 && spread_t > 0.0 {
        intr.focal * spread_t / spread_o
    } else {
        1.0
    };
    let t = Vector3::new(
        (om.x - intr.cx) * depth / intr.focal - pm.x,
        (om.y - intr.cy) * depth / intr.focal - pm.y,
        depth - pm.z,
    );
    HeadPose::new(Default::default(), t)
}

/// Levenberg–Marquardt fit of one frame's pose to its landmarks.
pub fn refine_pose(
    obs: &[[f64; 2]],
    valid: &[bool],
    template: &[Vector3<f64>],
    intr: &CameraIntrinsics,
    init: HeadPose,
    config: &PoseFitConfig,
) -> PoseFit {
    let mut pose = init;
    let initial_error = frame_error(obs, valid, template, intr, &pose);
    let mut err = initial_error;
    let mut damping = 1e-3;
    for _ in 0..config.max_iters {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let r_mat = pose.rotation_matrix();
        for ((o, &v), p) in obs.iter().zip(valid).zip(template) {
            if !v {
                continue;
            }
            let rp = r_mat * p;
            let x = rp + pose.translation;
            let Some(uv) = project_camera_point(intr, &x) else { continue };
            let res = uv - Vector2::from(*o);
            let jp = projection_jacobian(intr, &x);
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&rp)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= 10.0;
                continue;
            };
            let mut cand = pose;
            cand.perturb_rotation(&step.fixed_rows::<3>(0).into_owned());
            cand.translation += step.fixed_rows::<3>(3);
            let e = frame_error(obs, valid, template, intr, &cand);
            if e < err {
                let gain = err - e;
                pose = cand;
                err = e;
                damping = (damping * 0.3).max(1e-12);
                improved = gain > 1e-15 * err.max(1e-300) && step.norm() > 1e-14;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    PoseFit {
        pose,
        initial_error,
        error: err,
        converged: err <= config.error_threshold,
    }
}

/// Per-frame pose fits, in parallel over frames.
pub fn refine_poses(
    tracks: &KeypointTracks,
    template: &LandmarkTemplate,
    intr: &CameraIntrinsics,
    init: Option<&[HeadPose]>,
    config: &PoseFitConfig,
) -> Result<Vec<PoseFit>> {
    intr.validate()?;
    tracks.validate()?;
    template.validate()?;
    ensure_len("template points", tracks.num_points(), template.points.len())?;
    if let Some(init) = init {
        ensure_len("initial poses", tracks.num_frames(), init.len())?;
    }
    let pts = template.vectors();
    Ok((0..tracks.num_frames())
        .into_par_iter()
        .map(|f| {
            let (obs, valid) = (&tracks.frames[f], &tracks.valid[f]);
            let start = init.map_or_else(|| initial_pose(obs, valid, &pts, intr), |p| p[f]);
            refine_pose(obs, valid, &pts, intr, start, config)
        })
        .collect())
}

/// `count` focal lengths spaced geometrically over `[lo, hi] × width`.
pub fn focal_candidates(width: usize, count: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    if count == 0 || !(range.0 > 0.0 && range.0 <= range.1) {
        return Err(Error::invalid("focal candidates", format!("{count} over {range:?}")));
    }
    let w = width as f64;
    if count == 1 {
        return Ok(vec![w * range.0]);
    }
    let ratio = (range.1 / range.0).ln();
    Ok((0..count)
        .map(|i| w * range.0 * (ratio * i as f64 / (count - 1) as f64).exp())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FocalSearch {
    pub focal: f64,
    /// Summed per-frame landmark error for every candidate.
    pub errors: Vec<f64>,
}

/// Refits every frame from scratch under each candidate and keeps the one
/// with the smallest summed error; ties go to the smaller focal length.
pub fn focal_search(
    tracks: &KeypointTracks,
    template: &LandmarkTemplate,
    candidates: &[f64],
    principal: (f64, f64),
    config: &PoseFitConfig,
) -> Result<FocalSearch> {
    if candidates.is_empty() {
        return Err(Error::invalid("focal candidates", "empty list"));
    }
    if tracks.num_frames() == 0 {
        return Err(Error::invalid("keypoint tracks", "no frames"));
    }
    let mut errors = Vec::with_capacity(candidates.len());
    for &f in candidates {
        let intr = CameraIntrinsics::new(f, principal.0, principal.1)?;
        let fits = refine_poses(tracks, template, &intr, None, config)?;
        errors.push(fits.iter().map(|p| p.error).sum::<f64>());
    }
    let mut best: Option<usize> = None;
    for (i, e) in errors.iter().enumerate() {
        if !e.is_finite() {
            continue;
        }
        best = match best {
            Some(b) if errors[b] < *e || (errors[b] == *e && candidates[b] <= candidates[i]) => Some(b),
            _ => Some(i),
        };
    }
    let b = best.ok_or_else(|| Error::Diverged("pose fitting failed for every focal candidate".into()))?;
    Ok(FocalSearch {
        focal: candidates[b],
        errors,
    })
}

/// Latent 3D keypoints, per-frame poses and intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleState {
    pub points: Vec<Vector3<f64>>,
    pub poses: Vec<HeadPose>,
    pub intr: CameraIntrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectionStats {
    /// Mean Euclidean error in pixels.
    pub mean_px: f64,
    /// Mean squared error in px².
    pub mean_sq_px2: f64,
    /// Sum of per-observation Euclidean errors.
    pub sum_px: f64,
    pub observations: usize,
}

pub fn reprojection_stats(state: &BundleState, tracks: &KeypointTracks) -> ReprojectionStats {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for (f, pose) in state.poses.iter().enumerate() {
        for (j, p) in state.points.iter().enumerate() {
            let Some(o) = tracks.observation(f, j) else { continue };
            let e = match project_camera_point(&state.intr, &pose.transform_point(p)) {
                Some(uv) => (uv - o).norm(),
                None => f64::INFINITY,
            };
            sum += e;
            sum_sq += e * e;
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    ReprojectionStats {
        mean_px: sum / d,
        mean_sq_px2: sum_sq / d,
        sum_px: sum,
        observations: n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BundleConfig {
    pub lr: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Weighted Gauss–Newton polish iterations after the first-order phase.
    pub polish_iters: usize,
}

impl BundleConfig {
    pub fn stage1() -> Self {
        Self {
            lr: 1e-2,
            max_iters: 2000,
            patience: 100,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            polish_iters: 50,
        }
    }

    pub fn stage2() -> Self {
        Self {
            lr: 1e-3,
            polish_iters: 0,
            ..Self::stage1()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    /// Cosine decay from `lr` towards zero over `max_iters`.
    fn lr_at(&self, it: usize) -> f64 {
        let p = it as f64 / self.max_iters.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Result {
    pub points: Vec<Vector3<f64>>,
    /// Keypoints seen in fewer than two views or only from one camera center.
    pub under_constrained: Vec<usize>,
    /// Best summed reprojection distance after every iteration.
    pub best_history: Vec<f64>,
}

/// Sum of reprojection distances of point `p` over all frames observing it.
fn point_cost(p: &Vector3<f64>, j: usize, poses: &[HeadPose], tracks: &KeypointTracks, intr: &CameraIntrinsics) -> f64 {
    let mut s = 0.0;
    for (f, pose) in poses.iter().enumerate() {
        let Some(o) = tracks.observation(f, j) else { continue };
        s += match project_camera_point(intr, &pose.transform_point(p)) {
            Some(uv) => (uv - o).norm(),
            None => f64::INFINITY,
        };
    }
    s
}

/// Cost and gradient of the summed distance for one point.
fn point_cost_grad(
    p: &Vector3<f64>,
    j: usize,
    poses: &[HeadPose],
    rots: &[Matrix3<f64>],
    tracks: &KeypointTracks,
    intr: &CameraIntrinsics,
) -> (f64, Vector3<f64>) {
    let mut s = 0.0;
    let mut g = Vector3::zeros();
    for (f, pose) in poses.iter().enumerate() {
        let Some(o) = tracks.observation(f, j) else { continue };
        let x = rots[f] * p + pose.translation;
        let Some(uv) = project_camera_point(intr, &x) else { continue };
        let r = uv - o;
        let n = r.norm();
        s += n;
        if n > 1e-300 {
            g += rots[f].transpose() * (projection_jacobian(intr, &x).transpose() * (r / n));
        }
    }
    (s, g)
}

fn is_under_constrained(j: usize, poses: &[HeadPose], tracks: &KeypointTracks) -> bool {
    let centers: Vec<Vector3<f64>> = (0..poses.len())
        .filter(|&f| tracks.valid[f][j])
        .map(|f| poses[f].camera_center())
        .collect();
    if centers.len() < 2 {
        return true;
    }
    let c0 = centers[0];
    centers.iter().all(|c| (c - c0).norm() <= 1e-9 * (1.0 + c0.norm()))
}

/// Triangulates every keypoint with the poses held fixed, minimizing the
/// summed reprojection distance from a random start.
pub fn ba_stage1(
    tracks: &KeypointTracks,
    poses: &[HeadPose],
    intr: &CameraIntrinsics,
    config: &BundleConfig,
) -> Result<Stage1Result> {
    tracks.validate()?;
    intr.validate()?;
    ensure_len("poses", tracks.num_frames(), poses.len())?;
    if poses.is_empty() {
        return Err(Error::invalid("keypoint tracks", "no frames"));
    }
    let j_count = tracks.num_points();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let first = poses[0];
    let depth = first.translation.z.abs().max(1e-3);
    let mut points: Vec<Vector3<f64>> = (0..j_count)
        .map(|_| {
            let c = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                depth + rng.random_range(-0.5..0.5),
            );
            first.rotation().inverse() * (c - first.translation)
        })
        .collect();
    let under: Vec<usize> = (0..j_count).filter(|&j| is_under_constrained(j, poses, tracks)).collect();
    let active: Vec<usize> = (0..j_count).filter(|j| !under.contains(j)).collect();
    let rots: Vec<Matrix3<f64>> = poses.iter().map(HeadPose::rotation_matrix).collect();

    let total = |pts: &[Vector3<f64>]| active.iter().map(|&j| point_cost(&pts[j], j, poses, tracks, intr)).sum::<f64>();
    let mut best = points.clone();
    let mut best_cost = total(&points);
    let mut history = Vec::new();
    let mut opt = AdamW::new(config.adam(), &[3 * j_count]);
    let mut flat = vec![0.0; 3 * j_count];
    let mut grad = vec![0.0; 3 * j_count];
    let mut since_best = 0usize;
    for it in 0..config.max_iters {
        let mut cost = 0.0;
        for &j in &active {
            let (c, g) = point_cost_grad(&points[j], j, poses, &rots, tracks, intr);
            cost += c;
            grad[3 * j..3 * j + 3].copy_from_slice(g.as_slice());
        }
        if cost < best_cost {
            best_cost = cost;
            best.clone_from(&points);
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(best_cost);
        if since_best > config.patience {
            break;
        }
        for (k, p) in points.iter().enumerate() {
            flat[3 * k..3 * k + 3].copy_from_slice(p.as_slice());
        }
        opt.step(&mut [&mut flat], &[&grad], &[GroupRate { lr: config.lr_at(it), weight_decay: 0.0 }])?;
        for &j in &active {
            points[j] = Vector3::new(flat[3 * j], flat[3 * j + 1], flat[3 * j + 2]);
        }
    }
    let final_cost = total(&points);
    if final_cost < best_cost {
        best_cost = final_cost;
        best = points;
    }

    for _ in 0..config.polish_iters {
        for &j in &active {
            best[j] = polish_point(best[j], j, poses, &rots, tracks, intr);
        }
        best_cost = best_cost.min(total(&best));
        history.push(best_cost);
    }
    Ok(Stage1Result {
        points: best,
        under_constrained: under,
        best_history: history,
    })
}

/// One reweighted Gauss–Newton step on the summed distance, with
/// backtracking so the cost never increases.
fn polish_point(
    p: Vector3<f64>,
    j: usize,
    poses: &[HeadPose],
    rots: &[Matrix3<f64>],
    tracks: &KeypointTracks,
    intr: &CameraIntrinsics,
) -> Vector3<f64> {
    let mut h = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (f, pose) in poses.iter().enumerate() {
        let Some(o) = tracks.observation(f, j) else { continue };
        let x = rots[f] * p + pose.translation;
        let Some(uv) = project_camera_point(intr, &x) else { continue };
        let r = uv - o;
        let w = 1.0 / r.norm().max(1e-9);
        let jac = projection_jacobian(intr, &x) * rots[f];
        h += w * jac.transpose() * jac;
        b += w * jac.transpose() * r;
    }
    let Some(step) = h.cholesky().map(|c| c.solve(&(-b))) else { return p };
    let c0 = point_cost(&p, j, poses, tracks, intr);
    let mut t = 1.0;
    for _ in 0..20 {
        let cand = p + step * t;
        if point_cost(&cand, j, poses, tracks, intr) <= c0 {
            return cand;
        }
        t *= 0.5;
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Result {
    pub state: BundleState,
    pub initial_cost: f64,
    pub best_cost: f64,
    /// Best summed reprojection distance after every iteration.
    pub best_history: Vec<f64>,
    pub iterations: usize,
}

fn bundle_cost(state: &BundleState, tracks: &KeypointTracks) -> f64 {
    reprojection_stats(state, tracks).sum_px
}

/// Joint first-order refinement of points, rotations and translations.
/// Rotations are updated by left tangent increments and renormalized every
/// step. Returns the best state seen.
pub fn ba_stage2(state: BundleState, tracks: &KeypointTracks, config: &BundleConfig) -> Result<Stage2Result> {
    tracks.validate()?;
    state.intr.validate()?;
    ensure_len("poses", tracks.num_frames(), state.poses.len())?;
    ensure_len("points", tracks.num_points(), state.points.len())?;
    let nj = state.points.len();
    let nf = state.poses.len();
    let intr = state.intr;
    let mut cur = state;
    let initial_cost = bundle_cost(&cur, tracks);
    let mut best = cur.clone();
    let mut best_cost = initial_cost;
    let mut history = Vec::new();
    let mut opt = AdamW::new(config.adam(), &[3 * nj, 3 * nf, 3 * nf]);
    let mut g_pts = vec![0.0; 3 * nj];
    let mut g_rot = vec![0.0; 3 * nf];
    let mut g_trans = vec![0.0; 3 * nf];
    let mut since_best = 0usize;
    let mut iterations = 0;
    for it in 0..config.max_iters {
        iterations = it + 1;
        g_pts.fill(0.0);
        g_rot.fill(0.0);
        g_trans.fill(0.0);
        let mut cost = 0.0;
        for (f, pose) in cur.poses.iter().enumerate() {
            let rot = pose.rotation_matrix();
            for (j, p) in cur.points.iter().enumerate() {
                let Some(o) = tracks.observation(f, j) else { continue };
                let rp = rot * p;
                let x = rp + pose.translation;
                let Some(uv) = project_camera_point(&intr, &x) else {
                    cost = f64::INFINITY;
                    continue;
                };
                let r = uv - o;
                let n = r.norm();
                cost += n;
                if n <= 1e-300 {
                    continue;
                }
                let gx = projection_jacobian(&intr, &x).transpose() * (r / n);
                let gp = rot.transpose() * gx;
                let gw = rp.cross(&gx);
                for k in 0..3 {
                    g_pts[3 * j + k] += gp[k];
                    g_rot[3 * f + k] += gw[k];
                    g_trans[3 * f + k] += gx[k];
                }
            }
        }
        if cost < best_cost {
            best_cost = cost;
            best.clone_from(&cur);
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(best_cost);
        if since_best > config.patience {
            break;
        }
        let mut pts: Vec<f64> = cur.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let mut omega = vec![0.0; 3 * nf];
        let mut trans: Vec<f64> = cur.poses.iter().flat_map(|p| [p.translation.x, p.translation.y, p.translation.z]).collect();
        let rate = GroupRate { lr: config.lr_at(it), weight_decay: 0.0 };
        opt.step(&mut [&mut pts, &mut omega, &mut trans], &[&g_pts, &g_rot, &g_trans], &[rate; 3])?;
        for (j, p) in cur.points.iter_mut().enumerate() {
            *p = Vector3::new(pts[3 * j], pts[3 * j + 1], pts[3 * j + 2]);
        }
        for (f, pose) in cur.poses.iter_mut().enumerate() {
            pose.perturb_rotation(&Vector3::new(omega[3 * f], omega[3 * f + 1], omega[3 * f + 2]));
            pose.translation = Vector3::new(trans[3 * f], trans[3 * f + 1], trans[3 * f + 2]);
        }
    }
    let final_cost = bundle_cost(&cur, tracks);
    if final_cost < best_cost {
        best_cost = final_cost;
        best = cur;
    }
    Ok(Stage2Result {
        state: best,
        initial_cost,
        best_cost,
        best_history: history,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizeConfig {
    pub focal_candidates: usize,
    pub focal_range: (f64, f64),
    pub pose_fit: PoseFitConfig,
    pub stage1: BundleConfig,
    pub stage2: BundleConfig,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self {
            focal_candidates: 25,
            focal_range: (0.5, 2.0),
            pose_fit: PoseFitConfig::default(),
            stage1: BundleConfig::stage1(),
            stage2: BundleConfig::stage2(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stabilized {
    pub focal: FocalSearch,
    pub fits: Vec<PoseFit>,
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
}

/// Focal search, per-frame pose fitting, then both bundle stages.
pub fn stabilize(tracks: &KeypointTracks, template: &LandmarkTemplate, config: &StabilizeConfig) -> Result<Stabilized> {
    tracks.validate()?;
    let [w, h] = tracks.image_size;
    let principal = (w as f64 / 2.0, h as f64 / 2.0);
    let candidates = focal_candidates(w, config.focal_candidates, config.focal_range)?;
    let focal = focal_search(tracks, template, &candidates, principal, &config.pose_fit)?;
    let intr = CameraIntrinsics::new(focal.focal, principal.0, principal.1)?;
    let fits = refine_poses(tracks, template, &intr, None, &config.pose_fit)?;
    let poses: Vec<HeadPose> = fits.iter().map(|f| f.pose).collect();
    let stage1 = ba_stage1(tracks, &poses, &intr, &config.stage1)?;
    let state = BundleState {
        points: stage1.points.clone(),
        poses,
        intr,
    };
    let stage2 = ba_stage2(state, tracks, &config.stage2)?;
    Ok(Stabilized {
        focal,
        fits,
        stage1,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project;
    use rand_distr::{Distribution, Normal};

    fn template() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..6 {
            for k in 0..4 {
                let a = -0.9 + 0.36 * i as f64;
                let b = -0.6 + 0.4 * k as f64;
                pts.push(Vector3::new(0.3 * a.sin(), 0.35 * b.sin(), -0.3 * a.cos() * b.cos()));
            }
        }
        pts
    }

    fn trajectory(n: usize) -> Vec<HeadPose> {
        (0..n)
            .map(|t| {
                let s = t as f64 * 0.2;
                HeadPose::from_euler_yxz(0.3 * s.sin(), 0.1 * s.cos(), 0.05 * s.sin(), Vector3::new(0.02 * s.cos(), 0.01, 1.5))
            })
            .collect()
    }

    fn tracks_for(pts: &[Vector3<f64>], poses: &[HeadPose], intr: &CameraIntrinsics, size: usize, noise: f64, seed: u64) -> KeypointTracks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let frames = poses
            .iter()
            .map(|pose| {
                project(pts, intr, pose)
                    .into_iter()
                    .map(|uv| {
                        let uv = uv.unwrap();
                        if noise > 0.0 {
                            [uv.x + n.sample(&mut rng), uv.y + n.sample(&mut rng)]
                        } else {
                            [uv.x, uv.y]
                        }
                    })
                    .collect()
            })
            .collect();
        KeypointTracks {
            frames,
            valid: vec![vec![true; pts.len()]; poses.len()],
            image_size: [size, size],
        }
    }

    #[test]
    fn landmark_error_values() {
        let obs = [[1.0, 2.0], [3.0, 4.0]];
        let same: Vec<_> = obs.iter().map(|o| Some(Vector2::from(*o))).collect();
        assert_eq!(landmark_error(&obs, &same, &[true, true]).unwrap(), 0.0);
        let shifted: Vec<_> = obs.iter().map(|o| Some(Vector2::new(o[0] + 1.0, o[1]))).collect();
        assert_eq!(landmark_error(&obs, &shifted, &[true, true]).unwrap(), 1.0);
        assert!(landmark_error(&obs, &same, &[false, false]).is_err());
    }

    #[test]
    fn template_rejects_collinear_points() {
        let pts = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(LandmarkTemplate::new(pts).is_err());
        assert!(LandmarkTemplate::new(template()).is_ok());
    }

    #[test]
    fn refine_recovers_noiseless_pose() {
        let pts = template();
        let intr = CameraIntrinsics::centered(64.0, 64, 64).unwrap();
        let poses = trajectory(8);
        let tracks = tracks_for(&pts, &poses, &intr, 64, 0.0, 0);
        let tmpl = LandmarkTemplate::new(pts).unwrap();
        let fits = refine_poses(&tracks, &tmpl, &intr, None, &PoseFitConfig::default()).unwrap();
        for (fit, truth) in fits.iter().zip(&poses) {
            assert!(fit.error <= fit.initial_error);
            assert!(fit.pose.rotation_angle_to(truth).to_degrees() < 1e-6);
            assert!((fit.pose.translation - truth.translation).norm() < 1e-8);
        }
    }

    #[test]
    fn refine_from_truth_does_not_worsen() {
        let pts = template();
        let intr = CameraIntrinsics::centered(64.0, 64, 64).unwrap();
        let poses = trajectory(4);
        let tracks = tracks_for(&pts, &poses, &intr, 64, 0.5, 3);
        let tmpl = LandmarkTemplate::new(pts).unwrap();
        let fits = refine_poses(&tracks, &tmpl, &intr, Some(&poses), &PoseFitConfig::default()).unwrap();
        assert!(fits.iter().all(|f| f.error <= f.initial_error));
    }

    #[test]
    fn focal_candidates_include_width() {
        let c = focal_candidates(64, 25, (0.5, 2.0)).unwrap();
        assert_eq!(c.len(), 25);
        assert_close!(c[0], 32.0, 1e-12);
        assert_close!(c[12], 64.0, 1e-12);
        assert_close!(c[24], 128.0, 1e-9);
        assert!(focal_candidates(64, 0, (0.5, 2.0)).is_err());
    }

    #[test]
    fn single_candidate_is_returned() {
        let pts = template();
        let intr = CameraIntrinsics::centered(64.0, 64, 64).unwrap();
        let tracks = tracks_for(&pts, &trajectory(3), &intr, 64, 0.0, 0);
        let tmpl = LandmarkTemplate::new(pts).unwrap();
        let r = focal_search(&tracks, &tmpl, &[90.0], (32.0, 32.0), &PoseFitConfig::default()).unwrap();
        assert_eq!(r.focal, 90.0);
    }

    #[test]
    fn focal_search_finds_ground_truth() {
        let pts = template();
        let intr = CameraIntrinsics::centered(64.0, 64, 64).unwrap();
        let tracks = tracks_for(&pts, &trajectory(6), &intr, 64, 0.0, 0);
        let tmpl = LandmarkTemplate::new(pts).unwrap();
        let cands = focal_candidates(64, 25, (0.5, 2.0)).unwrap();
        let r = focal_search(&tracks, &tmpl, &cands, (32.0, 32.0), &PoseFitConfig::default()).unwrap();
        assert_close!(r.focal, 64.0, 1e-9);
    }

    #[test]
    fn stage1_flags_single_view_points() {
        let pts = template();
        let intr = CameraIntrinsics::centered(64.0, 64, 64).unwrap();
        let poses = trajectory(1);
        let tracks = tracks_for(&pts, &poses, &intr, 64, 0.0, 0);
        let r = ba_stage1(&tracks, &poses, &intr, &BundleConfig::stage1()).unwrap();
        assert_eq!(r.under_constrained.len(), pts.len());
    }

    #[test]
    fn stage1_triangulates_noiseless_points() {
        let pts = template();
        let intr = CameraIntrinsics::centered(64.0, 64, 64).unwrap();
        let poses = trajectory(10);
        let tracks = tracks_for(&pts, &poses, &intr, 64, 0.0, 0);
        let r = ba_stage1(&tracks, &poses, &intr, &BundleConfig::stage1()).unwrap();
        assert!(r.under_constrained.is_empty());
        for (a, b) in r.points.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-6, "{a} vs {b}");
        }
        assert!(r.best_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn stage2_keeps_rotations_orthonormal_and_never_worsens() {
        let pts = template();
        let intr = CameraIntrinsics::centered(64.0, 64, 64).unwrap();
        let poses = trajectory(6);
        let tracks = tracks_for(&pts, &poses, &intr, 64, 0.7, 9);
        let state = BundleState {
            points: pts,
            poses,
            intr,
        };
        let before = bundle_cost(&state, &tracks);
        let cfg = BundleConfig {
            max_iters: 300,
            ..BundleConfig::stage2()
        };
        let r = ba_stage2(state, &tracks, &cfg).unwrap();
        assert!(r.best_cost <= before);
        assert!(r.best_history.windows(2).all(|w| w[1] <= w[0]));
        for p in &r.state.poses {
            let m = p.rotation_matrix();
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
        }
    }
}
