use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use synctalk_core::camera::project_point;
use synctalk_core::head_sync::{KeypointTracks, LandmarkTemplate};
use synctalk_core::io::checkpoint::load_checkpoint;
use synctalk_core::io::dataset::{frame_name, read_cameras, read_cond, write_cameras, write_tracks, Dataset, FrameCamera};
use synctalk_core::portrait_sync::{blend_face, fill_neck_gap, mean_neck_color, RegionMask};
use synctalk_core::volume_renderer::{render_frame_full, RenderOptions, Sampling};
use synctalk_core::FrameBuffer;

use crate::GlobalOpts;

pub fn run(g: &GlobalOpts, checkpoint: &Path, poses: &Path, cond: &Path, dataset: Option<&Path>) -> Result<()> {
    let cfg = g.run_config()?;
    let out = g.out_dir(Path::new("renders"));
    let trainer = load_checkpoint(checkpoint)?;
    let field_cfg = *trainer.field.config();
    let cameras = read_cameras(poses)?;
    let table = read_cond(cond, field_cfg.lip_width)?;
    if table.len() != cameras.len() {
        bail!(
            "{} has {} rows but {} has {} poses",
            cond.display(),
            table.len(),
            poses.display(),
            cameras.len()
        );
    }
    let pipeline = cfg.conditioning.pipeline(field_cfg.lip_width)?;
    let features = table.features(&pipeline, cfg.conditioning.lip_window)?;
    let base = match dataset {
        Some(d) => Some(Dataset::load(d).with_context(|| format!("loading dataset {}", d.display()))?),
        None => None,
    };
    let (width, height) = match &base {
        Some(ds) => (ds.meta.width, ds.meta.height),
        None => {
            let c = &cameras[0].intr;
            ((2.0 * c.cx).round() as usize, (2.0 * c.cy).round() as usize)
        }
    };
    if let Some(ds) = &base {
        if ds.num_frames() < cameras.len() {
            bail!("dataset has {} frames but {} poses were given", ds.num_frames(), cameras.len());
        }
    }
    let opts = RenderOptions {
        n_samples: cfg.render.samples,
        background: trainer.background,
        sampling: Sampling::Midpoint,
        early_stop: cfg.render.early_stop,
        ..Default::default()
    };

    let frame_dir = out.join("frames");
    fs::create_dir_all(&frame_dir).with_context(|| format!("creating {}", frame_dir.display()))?;
    for (i, (cam, cond)) in cameras.iter().zip(&features).enumerate() {
        let r = render_frame_full(&trainer.field, &cam.intr, &cam.pose, cond, width, height, &opts)?;
        let frame = match &base {
            Some(ds) if cfg.render.composite => composite(ds, i, &r.color, &r.opacity, cfg.render.blur_sigma)?,
            _ => r.color,
        };
        frame.save_png(frame_dir.join(frame_name(i)))?;
    }
    write_cameras(&out.join("poses.json"), &cameras)?;
    if let Some(template) = base.as_ref().and_then(|d| d.template.as_ref()) {
        write_tracks(&out.join("tracks.json"), &project_tracks(template, &cameras, width, height))?;
    }
    eprintln!("rendered {} frames to {}", cameras.len(), frame_dir.display());
    Ok(())
}

/// Blends the render into the dataset frame through the blurred face mask,
/// then fills neck pixels the render leaves uncovered with the mean neck
/// color.
fn composite(ds: &Dataset, i: usize, rendered: &FrameBuffer, opacity: &RegionMask, sigma: f64) -> Result<FrameBuffer> {
    let original = &ds.frames[i];
    let Some(face) = ds.face_masks.as_ref().map(|m| &m[i]) else {
        return Ok(rendered.clone());
    };
    let mut out = blend_face(rendered, original, face, sigma)?;
    if let Some(neck) = ds.neck_masks.as_ref().map(|m| &m[i]) {
        if neck.total() > 0.0 {
            let color = mean_neck_color(original, neck)?;
            let (w, h) = neck.dims();
            let gap = RegionMask::from_fn(w, h, |x, y| (neck.get(x, y) * face.get(x, y) * (1.0 - opacity.get(x, y))).clamp(0.0, 1.0))?;
            out = fill_neck_gap(&out, &gap, color)?;
        }
    }
    Ok(out)
}

/// Landmark tracks implied by the template under the render cameras.
fn project_tracks(template: &LandmarkTemplate, cameras: &[FrameCamera], width: usize, height: usize) -> KeypointTracks {
    let pts = template.vectors();
    let (frames, valid) = cameras
        .par_iter()
        .map(|c| {
            let proj: Vec<Option<_>> = pts.iter().map(|p| project_point(&c.intr, &c.pose, p)).collect();
            (
                proj.iter().map(|p| p.map_or([0.0, 0.0], |v| [v.x, v.y])).collect(),
                proj.iter().map(Option::is_some).collect(),
            )
        })
        .unzip();
    KeypointTracks {
        frames,
        valid,
        image_size: [width, height],
    }
}
