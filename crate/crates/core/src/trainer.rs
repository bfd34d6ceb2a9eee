//! Coarse-to-fine fitting of the radiance field to posed, conditioned frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, HeadPose};
use crate::error::{ensure_len, Error, Result};
use crate::frame::FrameBuffer;
use crate::metrics::psnr;
use crate::occupancy::{OccupancyConfig, OccupancyGrid};
use crate::optim::{AdamConfig, AdamW, GroupRate};
use crate::radiance_field::{ConditioningFeatures, FieldConfig, FieldGradients, RadianceField};
use crate::volume_renderer::{make_rays, render_backward, render_frame, render_rays, Ray, RenderOptions, RenderTape, Sampling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub coarse_iters: u64,
    pub fine_iters: u64,
    pub rays_per_iter: usize,
    pub patch_size: usize,
    /// Weight of the patch perceptual term in the fine stage.
    pub lambda: f64,
    pub lr_hash: f64,
    pub lr_other: f64,
    /// Decoupled weight decay on network weights (tables are not decayed).
    pub weight_decay: f64,
    /// Learning rates decay exponentially to this fraction at the last step.
    pub lr_final_ratio: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Transmittance threshold for early ray termination.
    pub early_stop: f64,
    /// Every `holdout_every`-th frame is held out for evaluation.
    pub holdout_every: usize,
    pub checkpoint_every: u64,
    /// Empty-space skipping; `None` samples the whole box.
    pub occupancy: Option<OccupancyConfig>,
    /// Iterations between occupancy refreshes.
    pub occupancy_every: u64,
    /// First iteration at which the occupancy grid is refreshed.
    pub occupancy_warmup: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            coarse_iters: 5000,
            fine_iters: 1000,
            rays_per_iter: 1024,
            patch_size: 32,
            lambda: 0.1,
            lr_hash: 1e-2,
            lr_other: 1e-3,
            weight_decay: 1e-6,
            lr_final_ratio: 0.1,
            train_samples: 64,
            eval_samples: 128,
            early_stop: 1e-4,
            holdout_every: 10,
            checkpoint_every: 1000,
            occupancy: Some(OccupancyConfig::default()),
            occupancy_every: 16,
            occupancy_warmup: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.coarse_iters + self.fine_iters == 0 {
            return bad("coarse_iters", "the schedule has no iterations");
        }
        if self.rays_per_iter == 0 {
            return bad("rays_per_iter", "must be positive");
        }
        if self.patch_size < 4 {
            return bad("patch_size", "patches must be at least 4x4");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be nonnegative");
        }
        if !(self.lr_hash >= 0.0) || !(self.lr_other >= 0.0) {
            return bad("lr_hash", "learning rates must be nonnegative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad("lr_final_ratio", "must lie in (0, 1]");
        }
        if self.train_samples < 2 || self.eval_samples < 2 {
            return bad("train_samples", "at least 2 samples per ray");
        }
        if !(0.0..1.0).contains(&self.early_stop) {
            return bad("early_stop", "must lie in [0, 1)");
        }
        if self.holdout_every < 2 {
            return bad("holdout_every", "must be at least 2");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive");
        }
        if let Some(o) = &self.occupancy {
            o.validate()?;
            if self.occupancy_every == 0 {
                return bad("occupancy_every", "must be positive");
            }
        }
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        self.coarse_iters + self.fine_iters
    }

    pub fn stage_at(&self, iteration: u64) -> Stage {
        if iteration < self.coarse_iters {
            Stage::Coarse
        } else {
            Stage::Fine
        }
    }

    /// Learning-rate multiplier at `iteration`.
    pub fn lr_scale(&self, iteration: u64) -> f64 {
        let p = iteration as f64 / self.total_iters().max(1) as f64;
        self.lr_final_ratio.powf(p)
    }

    /// Held-out frame indices among `frames`.
    pub fn is_holdout(&self, frame: usize) -> bool {
        frame % self.holdout_every == self.holdout_every / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub frame: FrameBuffer,
    pub pose: HeadPose,
    pub intr: CameraIntrinsics,
    pub cond: ConditioningFeatures,
}

/// Rays from one frame with their target colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub target: Vec<[f64; 3]>,
    pub cond: ConditioningFeatures,
    /// `(width, height)` when the rays form a row-major patch.
    pub patch: Option<(usize, usize)>,
    /// Seed for the stratified jitter of this batch.
    pub jitter_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub stage: Stage,
    pub loss: f64,
    pub photometric: f64,
    pub perceptual: f64,
}

/// Mean squared color error per ray, `mean ‖C − Ĉ‖²`.
pub fn photometric_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    ensure_len("photometric batch", target.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("photometric batch", "empty"));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Number of dyadic scales used by the perceptual substitute.
pub const PERCEPTUAL_SCALES: usize = 3;

/// Row-major `h × w × 3` image.
#[derive(Clone, Debug, PartialEq)]
struct Plane {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Plane {
    fn pool(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut c = [0.0; 3];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let p = self.px[(2 * y + dy) * self.w + 2 * x + dx];
                    for k in 0..3 {
                        c[k] += 0.25 * p[k];
                    }
                }
                px.push(c);
            }
        }
        Plane { w, h, px }
    }

    /// Adjoint of [`Plane::pool`].
    fn unpool_into(&self, parent: &mut Plane) {
        for y in 0..self.h {
            for x in 0..self.w {
                let g = self.px[y * self.w + x];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let p = &mut parent.px[(2 * y + dy) * parent.w + 2 * x + dx];
                    for k in 0..3 {
                        p[k] += 0.25 * g[k];
                    }
                }
            }
        }
    }

    fn zeros_like(&self) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            px: vec![[0.0; 3]; self.px.len()],
        }
    }
}

/// Multi-scale gradient-difference loss and its gradient with respect to
/// `pred`. At each of three scales (2×2 average pooling between them) the
/// forward differences of both patches are compared; the mean absolute
/// difference over all horizontal and vertical entries is averaged over the
/// scales that still have differences.
pub fn patch_perceptual_loss_grad(pred: &[[f64; 3]], target: &[[f64; 3]], width: usize, height: usize) -> Result<(f64, Vec<[f64; 3]>)> {
    if width < 4 || height < 4 {
        return Err(Error::invalid("perceptual patch", format!("{width}x{height} is smaller than 4x4")));
    }
    ensure_len("perceptual patch", width * height, pred.len())?;
    ensure_len("perceptual patch", width * height, target.len())?;
    let mut ps = vec![Plane { w: width, h: height, px: pred.to_vec() }];
    let mut ts = vec![Plane { w: width, h: height, px: target.to_vec() }];
    for s in 1..PERCEPTUAL_SCALES {
        let p = ps[s - 1].pool();
        let t = ts[s - 1].pool();
        ps.push(p);
        ts.push(t);
    }
    let used: Vec<usize> = (0..PERCEPTUAL_SCALES)
        .filter(|&s| ps[s].w >= 2 || ps[s].h >= 2)
        .collect();
    let mut loss = 0.0;
    let mut grads: Vec<Plane> = ps.iter().map(Plane::zeros_like).collect();
    for &s in &used {
        let (p, t, g) = (&ps[s], &ts[s], &mut grads[s]);
        let count = 3 * ((p.w.saturating_sub(1)) * p.h + p.w * (p.h.saturating_sub(1)));
        let norm = 1.0 / (count as f64 * used.len() as f64);
        let mut term = 0.0;
        let mut visit = |a: usize, b: usize| {
            for k in 0..3 {
                let d = (p.px[b][k] - p.px[a][k]) - (t.px[b][k] - t.px[a][k]);
                term += d.abs();
                let sg = d.signum() * norm;
                if d != 0.0 {
                    g.px[b][k] += sg;
                    g.px[a][k] -= sg;
                }
            }
        };
        for y in 0..p.h {
            for x in 0..p.w {
                let i = y * p.w + x;
                if x + 1 < p.w {
                    visit(i, i + 1);
                }
                if y + 1 < p.h {
                    visit(i, i + p.w);
                }
            }
        }
        loss += term * norm;
    }
    for s in (1..PERCEPTUAL_SCALES).rev() {
        let (lo, hi) = grads.split_at_mut(s);
        hi[0].unpool_into(&mut lo[s - 1]);
    }
    Ok((loss, grads.swap_remove(0).px))
}

pub fn patch_perceptual_loss(pred: &[[f64; 3]], target: &[[f64; 3]], width: usize, height: usize) -> Result<f64> {
    patch_perceptual_loss_grad(pred, target, width, height).map(|(l, _)| l)
}

/// Splits 64-bit seeds into independent streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rays per parallel chunk. Fixed so results do not depend on thread count.
const TRAIN_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct Trainer {
    pub field: RadianceField,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub background: [f64; 3],
    iteration: u64,
}

impl Trainer {
    pub fn new(field_config: FieldConfig, config: TrainConfig, background: [f64; 3]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut field = RadianceField::new(field_config, &mut rng)?;
        if let Some(o) = config.occupancy {
            field.occupancy = Some(OccupancyGrid::new(o, field_config.bounds)?);
        }
        Ok(Self::from_parts(field, config, background, None, 0))
    }

    /// Reassembles a trainer from saved state.
    pub fn from_parts(field: RadianceField, config: TrainConfig, background: [f64; 3], optimizer: Option<AdamW>, iteration: u64) -> Self {
        let lens: Vec<usize> = field.param_groups().iter().map(|g| g.len()).collect();
        let optimizer = optimizer.unwrap_or_else(|| AdamW::new(AdamConfig::default(), &lens));
        Self {
            field,
            optimizer,
            config,
            background,
            iteration,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iters()
    }

    fn train_options(&self, jitter_seed: u64) -> RenderOptions {
        RenderOptions {
            n_samples: self.config.train_samples,
            background: self.background,
            sampling: Sampling::Stratified { seed: jitter_seed },
            early_stop: self.config.early_stop,
            ..Default::default()
        }
    }

    pub fn eval_options(&self) -> RenderOptions {
        RenderOptions {
            n_samples: self.config.eval_samples,
            background: self.background,
            sampling: Sampling::Midpoint,
            early_stop: self.config.early_stop,
            ..Default::default()
        }
    }

    /// Batch for the current iteration: random pixels in the coarse stage,
    /// one random patch in the fine stage, both from one random frame.
    pub fn sample_batch(&self, data: &[TrainingSample]) -> Result<RayBatch> {
        sample_batch(&self.config, data, self.iteration)
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &RayBatch, stage: Stage) -> Result<StepReport> {
        let n = batch.rays.len();
        ensure_len("batch targets", n, batch.target.len())?;
        if n == 0 {
            return Err(Error::invalid("ray batch", "empty"));
        }
        let opts = self.train_options(batch.jitter_seed);
        let field = &self.field;
        let tapes: Vec<RenderTape> = batch
            .rays
            .par_chunks(TRAIN_CHUNK)
            .enumerate()
            .map(|(c, rays)| render_rays(field, rays, &batch.cond, &opts, (c * TRAIN_CHUNK) as u64))
            .collect::<Result<_>>()?;
        let pred: Vec<[f64; 3]> = tapes.iter().flat_map(|t| t.outputs().iter().map(|o| o.color)).collect();

        let photometric = photometric_loss(&pred, &batch.target)?;
        let scale = 2.0 / n as f64;
        let mut d_color: Vec<[f64; 3]> = pred
            .iter()
            .zip(&batch.target)
            .map(|(p, t)| std::array::from_fn(|k| scale * (p[k] - t[k])))
            .collect();
        let mut perceptual = 0.0;
        if stage == Stage::Fine && self.config.lambda > 0.0 {
            let (w, h) = batch
                .patch
                .ok_or_else(|| Error::invalid("fine-stage batch", "rays do not form a patch"))?;
            let (l, g) = patch_perceptual_loss_grad(&pred, &batch.target, w, h)?;
            perceptual = l;
            for (d, gp) in d_color.iter_mut().zip(&g) {
                for k in 0..3 {
                    d[k] += self.config.lambda * gp[k];
                }
            }
        }
        let loss = photometric + self.config.lambda * perceptual;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                stage: stage.name(),
            });
        }

        let partials: Vec<FieldGradients> = tapes
            .par_iter()
            .enumerate()
            .map(|(c, tape)| {
                let lo = c * TRAIN_CHUNK;
                let hi = lo + tape.outputs().len();
                let mut g = FieldGradients::zeros_like(field);
                render_backward(field, tape, &d_color[lo..hi], &vec![0.0; hi - lo], &mut g);
                g
            })
            .collect();
        let grads = partials
            .into_iter()
            .reduce(|mut a, b| {
                a.add_assign(&b);
                a
            })
            .expect("at least one chunk");
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                stage: stage.name(),
            });
        }

        let s = self.config.lr_scale(self.iteration);
        let table = GroupRate {
            lr: self.config.lr_hash * s,
            weight_decay: 0.0,
        };
        let net = GroupRate {
            lr: self.config.lr_other * s,
            weight_decay: self.config.weight_decay,
        };
        let mut groups = self.field.param_groups_mut();
        self.optimizer
            .step(&mut groups, &grads.groups(), &[table, table, table, net, net])?;
        let report = StepReport {
            iteration: self.iteration,
            stage,
            loss,
            photometric,
            perceptual,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Refreshes the occupancy grid when due, then samples and applies the
    /// current iteration's step.
    pub fn step(&mut self, data: &[TrainingSample]) -> Result<StepReport> {
        let it = self.iteration;
        if it >= self.config.occupancy_warmup.max(1) && it % self.config.occupancy_every == 0 {
            let seed = mix_seed(self.config.seed, u64::MAX);
            let mut grid = self.field.occupancy.take();
            if let Some(g) = grid.as_mut() {
                g.refresh(&self.field, seed, it);
            }
            self.field.occupancy = grid;
        }
        let stage = self.config.stage_at(self.iteration);
        let batch = self.sample_batch(data)?;
        self.train_step(&batch, stage)
    }

    /// Renders a sample's view with evaluation settings.
    pub fn render(&self, sample: &TrainingSample) -> Result<FrameBuffer> {
        let (w, h) = sample.frame.dims();
        render_frame(&self.field, &sample.intr, &sample.pose, &sample.cond, w, h, &self.eval_options())
    }

    /// Mean PSNR over `samples` (each rendered at its own resolution).
    pub fn evaluate(&self, samples: &[TrainingSample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| psnr(&self.render(s)?, &s.frame)).collect()
    }
}

pub fn sample_batch(config: &TrainConfig, data: &[TrainingSample], iteration: u64) -> Result<RayBatch> {
    if data.is_empty() {
        return Err(Error::invalid("training set", "empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration);
    let sample = &data[rng.random_range(0..data.len())];
    let (w, h) = sample.frame.dims();
    let (pixels, patch) = match config.stage_at(iteration) {
        Stage::Coarse => {
            let px: Vec<(usize, usize)> = (0..config.rays_per_iter)
                .map(|_| (rng.random_range(0..w), rng.random_range(0..h)))
                .collect();
            (px, None)
        }
        Stage::Fine => {
            let p = config.patch_size;
            if p > w || p > h {
                return Err(Error::Config {
                    key: "patch_size".into(),
                    reason: format!("{p} exceeds the {w}x{h} frame"),
                });
            }
            let x0 = rng.random_range(0..=w - p);
            let y0 = rng.random_range(0..=h - p);
            let mut px = Vec::with_capacity(p * p);
            for y in 0..p {
                for x in 0..p {
                    px.push((x0 + x, y0 + y));
                }
            }
            (px, Some((p, p)))
        }
    };
    let uv: Vec<(f64, f64)> = pixels.iter().map(|&(x, y)| (x as f64 + 0.5, y as f64 + 0.5)).collect();
    let opts = RenderOptions::default();
    let rays = make_rays(&sample.intr, &sample.pose, &uv, (opts.near, opts.far))?;
    let target = pixels.iter().map(|&(x, y)| sample.frame.pixel(x, y)).collect();
    Ok(RayBatch {
        rays,
        target,
        cond: sample.cond.clone(),
        patch,
        jitter_seed: mix_seed(config.seed, iteration),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub steps: Vec<StepReport>,
    /// `(iteration, mean held-out PSNR)` at each checkpoint.
    pub holdout_psnr: Vec<(u64, f64)>,
}

/// Runs the remaining schedule. Every `checkpoint_every` iterations and at
/// the end, `on_checkpoint` receives the trainer, the steps taken since the
/// previous call and the mean held-out PSNR (when there are held-out frames).
pub fn fit_scene(
    trainer: &mut Trainer,
    train: &[TrainingSample],
    holdout: &[TrainingSample],
    mut on_checkpoint: impl FnMut(&Trainer, &[StepReport], Option<f64>) -> Result<()>,
) -> Result<FitReport> {
    if train.len() < 2 {
        return Err(Error::invalid("training set", "needs at least two frames"));
    }
    if train.iter().all(|s| s.pose == train[0].pose) {
        return Err(Error::invalid("training set", "all frames share one pose"));
    }
    let mut steps = Vec::new();
    let mut holdout_psnr = Vec::new();
    let mut flushed = 0;
    while !trainer.is_done() {
        steps.push(trainer.step(train)?);
        let it = trainer.iteration();
        if it % trainer.config.checkpoint_every == 0 || trainer.is_done() {
            let score = if holdout.is_empty() {
                None
            } else {
                let v = trainer.evaluate(holdout)?;
                Some(v.iter().sum::<f64>() / v.len() as f64)
            };
            if let Some(p) = score {
                holdout_psnr.push((it, p));
            }
            on_checkpoint(trainer, &steps[flushed..], score)?;
            flushed = steps.len();
        }
    }
    Ok(FitReport { steps, holdout_psnr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photometric_values() {
        let a = [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]];
        assert_eq!(photometric_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<[f64; 3]> = a.iter().map(|p| p.map(|v| v + 0.1)).collect();
        assert_close!(photometric_loss(&b, &a).unwrap(), 0.03, 1e-15);
    }

    fn edge(w: usize) -> Vec<[f64; 3]> {
        (0..w * w).map(|i| if i % w >= w / 2 { [1.0; 3] } else { [0.0; 3] }).collect()
    }

    #[test]
    fn perceptual_fixture_values() {
        let flat = vec![[0.0; 3]; 64];
        assert_close!(patch_perceptual_loss(&edge(8), &flat, 8, 8).unwrap(), 31.0 / 126.0, 1e-15);
        assert_eq!(patch_perceptual_loss(&edge(8), &edge(8), 8, 8).unwrap(), 0.0);
        let shifted: Vec<[f64; 3]> = edge(8).iter().map(|p| p.map(|v| v * 0.5 + 0.25)).collect();
        let half: Vec<[f64; 3]> = edge(8).iter().map(|p| p.map(|v| v * 0.5)).collect();
        assert_eq!(patch_perceptual_loss(&shifted, &half, 8, 8).unwrap(), 0.0);
        assert!(patch_perceptual_loss(&flat[..9], &flat[..9], 3, 3).is_err());
    }

    #[test]
    fn perceptual_gradient_matches_differences() {
        let w = 8;
        let pred: Vec<[f64; 3]> = (0..w * w).map(|i| std::array::from_fn(|k| ((i * 7 + k * 3) as f64 * 0.37).sin() * 0.5 + 0.5)).collect();
        let target: Vec<[f64; 3]> = (0..w * w).map(|i| std::array::from_fn(|k| ((i * 5 + k) as f64 * 0.91).cos() * 0.5 + 0.5)).collect();
        let (_, g) = patch_perceptual_loss_grad(&pred, &target, w, w).unwrap();
        let h = 1e-7;
        for i in [0, 9, 27, 63] {
            for k in 0..3 {
                let mut p = pred.clone();
                p[i][k] += h;
                let mut m = pred.clone();
                m[i][k] -= h;
                let fd = (patch_perceptual_loss(&p, &target, w, w).unwrap() - patch_perceptual_loss(&m, &target, w, w).unwrap()) / (2.0 * h);
                assert_close!(g[i][k], fd, 1e-6);
            }
        }
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = TrainConfig {
            patch_size: 2,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "patch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn learning_rate_decays_to_final_ratio() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_scale(0), 1.0);
        assert_close!(cfg.lr_scale(cfg.total_iters()), 0.1, 1e-12);
    }
}
