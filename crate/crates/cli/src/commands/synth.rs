use std::path::Path;

use anyhow::{Context, Result};
use synctalk_core::io::Dataset;
use synctalk_core::synth_scene::generate_scene;

use crate::GlobalOpts;

pub fn run(g: &GlobalOpts) -> Result<()> {
    let cfg = g.run_config()?;
    let out = g.out_dir(Path::new("dataset"));
    let seed = cfg.train.seed;
    let scene = generate_scene(&cfg.scene, seed)?;
    let ds = Dataset::from_scene(&scene, &cfg.tracks, seed)?;
    ds.save(&out).with_context(|| format!("writing dataset to {}", out.display()))?;
    eprintln!(
        "wrote {} frames ({}x{}) to {}",
        ds.num_frames(),
        ds.meta.width,
        ds.meta.height,
        out.display()
    );
    Ok(())
}
