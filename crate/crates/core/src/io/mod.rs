//! On-disk formats: run config, dataset directories, checkpoints and CSV
//! reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{ConditioningConfig, RenderConfig, RunConfig};
pub use dataset::{CondTable, Dataset, DatasetMeta, FrameCamera};
