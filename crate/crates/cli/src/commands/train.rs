use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use synctalk_core::io::checkpoint::{load_checkpoint, save_checkpoint};
use synctalk_core::io::dataset::{frame_name, Dataset};
use synctalk_core::io::report::{append_rows, read_rows, write_rows, HoldoutRow, LossRow};
use synctalk_core::trainer::{fit_scene, Trainer};

use crate::GlobalOpts;

pub fn run(g: &GlobalOpts, dataset: &Path) -> Result<()> {
    let cfg = g.run_config()?;
    let out = g.out_dir(Path::new("run"));
    let ds = Dataset::load(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    if ds.meta.lip_width != cfg.field.lip_width {
        bail!(
            "dataset lip width {} differs from field.lip_width = {}",
            ds.meta.lip_width,
            cfg.field.lip_width
        );
    }
    let pipeline = cfg.conditioning.pipeline(cfg.field.lip_width)?;
    let samples = ds.training_samples(&pipeline, cfg.conditioning.lip_window)?;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    let mut holdout_frames = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if cfg.train.is_holdout(i) {
            holdout_frames.push(i);
            holdout.push(s);
        } else {
            train.push(s);
        }
    }

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()).context("writing config.toml")?;
    let loss_path = out.join("loss.csv");
    let holdout_path = out.join("holdout.csv");

    let mut trainer = match &g.resume {
        Some(path) => {
            let t = load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            if t.config != cfg.train {
                eprintln!("note: continuing with the training settings stored in {}", path.display());
            }
            truncate_after(&loss_path, t.iteration(), |r: &LossRow| r.iteration)?;
            truncate_after(&holdout_path, t.iteration() + 1, |r: &HoldoutRow| r.iteration)?;
            t
        }
        None => {
            for p in [&loss_path, &holdout_path] {
                if p.exists() {
                    fs::remove_file(p).with_context(|| format!("removing stale {}", p.display()))?;
                }
            }
            Trainer::new(cfg.field, cfg.train.clone(), ds.meta.background)?
        }
    };

    let total = trainer.config.total_iters();
    eprintln!(
        "training {} frames ({} held out), iterations {}..{}",
        train.len(),
        holdout.len(),
        trainer.iteration(),
        total
    );
    let start = Instant::now();
    fit_scene(&mut trainer, &train, &holdout, |t, steps, score| {
        let rows: Vec<LossRow> = steps.iter().map(LossRow::from).collect();
        append_rows(&loss_path, &rows)?;
        if let Some(p) = score {
            append_rows(
                &holdout_path,
                &[HoldoutRow {
                    iteration: t.iteration(),
                    holdout_psnr_db: p,
                }],
            )?;
        }
        let path = ckpt_dir.join(format!("{:06}.stkc", t.iteration()));
        save_checkpoint(&path, t)?;
        save_checkpoint(&out.join("final.stkc"), t)?;
        let loss = rows.last().map_or(f64::NAN, |r| r.loss);
        match score {
            Some(p) => eprintln!(
                "iter {:>6}/{total}  loss {loss:.6}  held-out PSNR {p:.2} dB  ({:.0?})",
                t.iteration(),
                start.elapsed()
            ),
            None => eprintln!("iter {:>6}/{total}  loss {loss:.6}  ({:.0?})", t.iteration(), start.elapsed()),
        }
        Ok(())
    })?;

    let sample_dir = out.join("samples");
    fs::create_dir_all(&sample_dir)?;
    for (i, s) in holdout_frames.iter().zip(&holdout) {
        trainer.render(s)?.save_png(sample_dir.join(frame_name(*i)))?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Drops CSV rows at or beyond `iteration` so a resumed run appends cleanly.
fn truncate_after<T>(path: &Path, iteration: u64, key: impl Fn(&T) -> u64) -> Result<()>
where
    T: serde::Serialize + for<'de> serde::Deserialize<'de>,
{
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<T> = read_rows(path)?;
    let kept: Vec<T> = rows.into_iter().filter(|r| key(r) < iteration).collect();
    write_rows(path, &kept)?;
    Ok(())
}
