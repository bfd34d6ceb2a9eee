//! CSV reports: per-iteration losses, held-out PSNR and evaluation metrics.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::StepReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub stage: String,
    pub loss: f64,
    pub photometric: f64,
    pub perceptual: f64,
}

impl From<&StepReport> for LossRow {
    fn from(s: &StepReport) -> Self {
        Self {
            iteration: s.iteration,
            stage: s.stage.name().to_string(),
            loss: s.loss,
            photometric: s.photometric,
            perceptual: s.perceptual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub iteration: u64,
    pub holdout_psnr_db: f64,
}

/// One evaluation row. Per-frame rows carry PSNR and LMD; the summary row
/// (`frame = "mean"`) also carries the pose jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub frame: String,
    pub psnr_db: Option<f64>,
    pub lmd_px: Option<f64>,
    pub pose_jitter: Option<f64>,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e))).collect()
}
