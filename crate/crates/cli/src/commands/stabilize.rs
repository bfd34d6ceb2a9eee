use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use synctalk_core::head_sync::{reprojection_stats, stabilize, BundleState};
use synctalk_core::io::dataset::{read_template, read_tracks, write_cameras, FrameCamera};
use synctalk_core::metrics::pose_jitter;

use crate::GlobalOpts;

#[derive(Serialize)]
struct StabilizeReport {
    focal: f64,
    frames: usize,
    unconverged_frames: Vec<usize>,
    initial_reprojection_px: f64,
    final_reprojection_px: f64,
    initial_jitter: f64,
    final_jitter: f64,
}

pub fn run(g: &GlobalOpts, tracks: &Path, template: &Path) -> Result<()> {
    let cfg = g.run_config()?;
    let out = g.out_dir(Path::new("stabilized"));
    let tracks = read_tracks(tracks)?;
    let template = read_template(template)?;
    let result = stabilize(&tracks, &template, &cfg.stabilize)?;

    let state = &result.stage2.state;
    let initial = BundleState {
        points: template.vectors(),
        poses: result.fits.iter().map(|f| f.pose).collect(),
        intr: state.intr,
    };
    let report = StabilizeReport {
        focal: result.focal.focal,
        frames: state.poses.len(),
        unconverged_frames: (0..result.fits.len()).filter(|&i| !result.fits[i].converged).collect(),
        initial_reprojection_px: reprojection_stats(&initial, &tracks).mean_px,
        final_reprojection_px: reprojection_stats(state, &tracks).mean_px,
        initial_jitter: pose_jitter(&initial.poses)?,
        final_jitter: pose_jitter(&state.poses)?,
    };

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cameras: Vec<FrameCamera> = state
        .poses
        .iter()
        .map(|&pose| FrameCamera { pose, intr: state.intr })
        .collect();
    write_cameras(&out.join("poses.json"), &cameras)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out.join("report.json"), text).context("writing report.json")?;
    eprintln!(
        "focal {:.3}, reprojection {:.4} -> {:.4} px, jitter {:.3e} -> {:.3e}",
        report.focal,
        report.initial_reprojection_px,
        report.final_reprojection_px,
        report.initial_jitter,
        report.final_jitter
    );
    Ok(())
}
