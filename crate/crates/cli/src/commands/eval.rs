use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::Vector2;
use synctalk_core::io::dataset::{read_cameras, read_frames, read_tracks};
use synctalk_core::io::report::{write_rows, MetricsRow};
use synctalk_core::metrics::{lmd, pose_jitter, psnr};

use crate::GlobalOpts;

pub fn run(g: &GlobalOpts, render_dir: &Path, reference_dir: &Path, run_id: Option<&str>) -> Result<()> {
    let out = g.out_dir(&render_dir.join("metrics.csv"));
    let run_id = run_id.map(str::to_string).unwrap_or_else(|| {
        render_dir
            .file_name()
            .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let rendered = read_frames(&render_dir.join("frames")).with_context(|| format!("reading {}", render_dir.display()))?;
    let reference = read_frames(&reference_dir.join("frames")).with_context(|| format!("reading {}", reference_dir.display()))?;
    if rendered.is_empty() {
        bail!("{} contains no frames", render_dir.join("frames").display());
    }
    if reference.len() < rendered.len() {
        bail!("{} rendered frames but only {} reference frames", rendered.len(), reference.len());
    }
    let psnrs: Vec<f64> = rendered
        .iter()
        .zip(&reference)
        .map(|(a, b)| psnr(a, b))
        .collect::<Result<_, _>>()?;

    let tracks = (render_dir.join("tracks.json"), reference_dir.join("tracks.json"));
    let lmds: Option<Vec<f64>> = if tracks.0.exists() && tracks.1.exists() {
        let a = read_tracks(&tracks.0)?;
        let b = read_tracks(&tracks.1)?;
        if a.num_points() != b.num_points() {
            bail!("landmark counts differ: {} vs {}", a.num_points(), b.num_points());
        }
        Some(
            (0..rendered.len())
                .map(|f| {
                    let (pa, pb): (Vec<_>, Vec<_>) = (0..a.num_points())
                        .filter(|&j| a.valid[f][j] && b.valid[f][j])
                        .map(|j| (Vector2::from(a.frames[f][j]), Vector2::from(b.frames[f][j])))
                        .unzip();
                    lmd(&[pa], &[pb])
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    let poses_path = render_dir.join("poses.json");
    let jitter = if poses_path.exists() {
        let poses: Vec<_> = read_cameras(&poses_path)?.into_iter().map(|c| c.pose).collect();
        (poses.len() >= 3).then(|| pose_jitter(&poses)).transpose()?
    } else {
        None
    };

    let mut rows: Vec<MetricsRow> = psnrs
        .iter()
        .enumerate()
        .map(|(i, &p)| MetricsRow {
            run_id: run_id.clone(),
            frame: i.to_string(),
            psnr_db: Some(p),
            lmd_px: lmds.as_ref().map(|l| l[i]),
            pose_jitter: None,
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    rows.push(MetricsRow {
        run_id,
        frame: "mean".into(),
        psnr_db: Some(mean(&psnrs)),
        lmd_px: lmds.as_deref().map(mean),
        pose_jitter: jitter,
    });
    write_rows(&out, &rows)?;
    eprintln!("mean PSNR {:.2} dB over {} frames -> {}", mean(&psnrs), psnrs.len(), out.display());
    Ok(())
}
