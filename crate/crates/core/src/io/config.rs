//! Run configuration: one TOML file holding every tunable with its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face_sync::{ConditioningPipeline, DEFAULT_CORE_INDICES};
use crate::head_sync::StabilizeConfig;
use crate::radiance_field::FieldConfig;
use crate::synth_scene::{SceneSpec, TrackNoise};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    /// Blendshape indices kept as expression conditioning.
    pub core_indices: Vec<usize>,
    /// Frames averaged (centered) into each lip feature.
    pub lip_window: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            core_indices: DEFAULT_CORE_INDICES.to_vec(),
            lip_window: 1,
        }
    }
}

impl ConditioningConfig {
    pub fn pipeline(&self, lip_width: usize) -> Result<ConditioningPipeline> {
        let mut p = ConditioningPipeline::new(lip_width);
        p.attention = crate::face_sync::RegionAttention::split(lip_width, self.core_indices.len());
        p.core_indices = self.core_indices.clone();
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples: usize,
    pub early_stop: f64,
    /// Blur applied to the face mask before compositing, in pixels.
    pub blur_sigma: f64,
    /// Composite onto the dataset frames when they are available.
    pub composite: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            early_stop: 1e-4,
            blur_sigma: 1.5,
            composite: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub tracks: TrackNoise,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub conditioning: ConditioningConfig,
    pub render: RenderConfig,
    pub stabilize: StabilizeConfig,
}

fn keyed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, reason } => Error::Config {
            key: format!("{section}.{key}"),
            reason,
        },
        other => Error::Config {
            key: section.to_string(),
            reason: other.to_string(),
        },
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("<root>").to_string();
            Error::Config {
                key,
                reason: e.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { key, reason } => Error::Config {
                key,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides every seed in the configuration.
    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.stabilize.stage1.seed = seed;
        self.stabilize.stage2.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| keyed("scene", e))?;
        let t = &self.tracks;
        if !(t.pixel_sigma >= 0.0 && t.rotation_deg >= 0.0 && t.translation >= 0.0) {
            return Err(Error::Config {
                key: "tracks".into(),
                reason: "noise levels must be nonnegative".into(),
            });
        }
        self.field.validate().map_err(|e| keyed("field", e))?;
        self.train.validate().map_err(|e| keyed("train", e))?;
        if self.scene.lip_width != self.field.lip_width {
            return Err(Error::Config {
                key: "field.lip_width".into(),
                reason: format!("{} differs from scene.lip_width = {}", self.field.lip_width, self.scene.lip_width),
            });
        }
        if self.conditioning.core_indices.len() != self.field.expr_width {
            return Err(Error::Config {
                key: "conditioning.core_indices".into(),
                reason: format!(
                    "{} indices for field.expr_width = {}",
                    self.conditioning.core_indices.len(),
                    self.field.expr_width
                ),
            });
        }
        if self.conditioning.lip_window == 0 {
            return Err(Error::Config {
                key: "conditioning.lip_window".into(),
                reason: "must be positive".into(),
            });
        }
        self.conditioning
            .pipeline(self.field.lip_width)
            .map_err(|e| keyed("conditioning", e))?;
        let r = &self.render;
        if r.samples < 2 {
            return Err(Error::Config {
                key: "render.samples".into(),
                reason: "at least 2 samples per ray".into(),
            });
        }
        if !(0.0..1.0).contains(&r.early_stop) {
            return Err(Error::Config {
                key: "render.early_stop".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        if !(r.blur_sigma >= 0.0 && r.blur_sigma.is_finite()) {
            return Err(Error::Config {
                key: "render.blur_sigma".into(),
                reason: "must be finite and nonnegative".into(),
            });
        }
        let s = &self.stabilize;
        if s.focal_candidates == 0 {
            return Err(Error::Config {
                key: "stabilize.focal_candidates".into(),
                reason: "must be positive".into(),
            });
        }
        if !(s.focal_range.0 > 0.0 && s.focal_range.0 <= s.focal_range.1) {
            return Err(Error::Config {
                key: "stabilize.focal_range".into(),
                reason: "expected 0 < low <= high".into(),
            });
        }
        Ok(())
    }
}
