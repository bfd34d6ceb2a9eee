use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use synctalk_core::io::RunConfig;

mod commands;

/// Talking-head synthesis toolkit: synthetic scenes, radiance-field
/// training, head-pose stabilization, rendering and evaluation.
#[derive(Parser, Debug)]
#[command(name = "synctalk", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (directory, or file for `eval`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    /// Worker threads; SYNCTALK_CORE_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth,
    /// Fit a radiance field to a dataset directory.
    Train {
        dataset: PathBuf,
    },
    /// Estimate focal length and smooth head poses from keypoint tracks.
    Stabilize {
        tracks: PathBuf,
        template: PathBuf,
    },
    /// Render frames from a checkpoint for the given poses and conditioning.
    Render {
        checkpoint: PathBuf,
        poses: PathBuf,
        cond: PathBuf,
        /// Dataset whose frames and masks the renders are composited onto.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Compare rendered frames with reference frames.
    Eval {
        render_dir: PathBuf,
        reference_dir: PathBuf,
        /// Run identifier written to every row; defaults to the render directory name.
        #[arg(long)]
        run_id: Option<String>,
    },
}

pub const THREADS_ENV: &str = "SYNCTALK_CORE_THREADS";

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
            Ok(Some(n))
        }
        _ => Ok(flag),
    }
}

impl GlobalOpts {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.apply_seed(s);
        }
        Ok(cfg)
    }

    pub fn out_dir(&self, default: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default.to_path_buf())
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.global.threads)? {
        anyhow::ensure!(n > 0, "thread count must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth => commands::synth::run(g),
        Command::Train { dataset } => commands::train::run(g, dataset),
        Command::Stabilize { tracks, template } => commands::stabilize::run(g, tracks, template),
        Command::Render {
            checkpoint,
            poses,
            cond,
            dataset,
        } => commands::render::run(g, checkpoint, poses, cond, dataset.as_deref()),
        Command::Eval {
            render_dir,
            reference_dir,
            run_id,
        } => commands::eval::run(g, render_dir, reference_dir, run_id.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
