//! Coarse voxel grid of cached densities used to skip empty space.
//!
//! Each cell keeps a running maximum of the field's density, decayed on
//! every refresh. A cell is occupied while its cached density exceeds
//! `min(mean cached density, threshold)`. Before the first refresh every
//! cell counts as occupied.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Aabb;
use crate::error::{ensure_len, Error, Result};
use crate::radiance_field::RadianceField;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccupancyConfig {
    /// Cells per axis.
    pub resolution: usize,
    /// Density below which a cell may be skipped.
    pub threshold: f64,
    /// Multiplier applied to cached densities before each refresh.
    pub decay: f64,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            threshold: 1.0,
            decay: 0.95,
        }
    }
}

impl OccupancyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution > 256 {
            return Err(Error::Config {
                key: "occupancy.resolution".into(),
                reason: format!("{} outside 1..=256", self.resolution),
            });
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config {
                key: "occupancy.threshold".into(),
                reason: "must be nonnegative".into(),
            });
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config {
                key: "occupancy.decay".into(),
                reason: "must lie in (0, 1]".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    config: OccupancyConfig,
    bounds: Aabb,
    cache: Vec<f64>,
    occupied: Vec<bool>,
    refreshes: u64,
}

const REFRESH_CHUNK: usize = 4096;

impl OccupancyGrid {
    pub fn new(config: OccupancyConfig, bounds: Aabb) -> Result<Self> {
        config.validate()?;
        let n = config.resolution.pow(3);
        Ok(Self {
            config,
            bounds,
            cache: vec![0.0; n],
            occupied: vec![true; n],
            refreshes: 0,
        })
    }

    /// Rebuilds a grid from saved cached densities.
    pub fn from_cache(config: OccupancyConfig, bounds: Aabb, cache: Vec<f64>, refreshes: u64) -> Result<Self> {
        let mut g = Self::new(config, bounds)?;
        ensure_len("occupancy cache", g.cache.len(), cache.len())?;
        if cache.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("occupancy cache", "densities must be finite and nonnegative"));
        }
        g.cache = cache;
        g.refreshes = refreshes;
        g.classify();
        Ok(g)
    }

    pub fn config(&self) -> &OccupancyConfig {
        &self.config
    }

    pub fn cache(&self) -> &[f64] {
        &self.cache
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied.iter().filter(|&&o| o).count() as f64 / self.occupied.len() as f64
    }

    fn cell_of(&self, p: &Vector3<f64>) -> Option<usize> {
        let r = self.config.resolution;
        let mut idx = 0;
        for axis in (0..3).rev() {
            let u = (p[axis] - self.bounds.min[axis]) / self.bounds.extent(axis);
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            let c = ((u * r as f64) as usize).min(r - 1);
            idx = idx * r + c;
        }
        Some(idx)
    }

    /// False for points outside the grid's box.
    pub fn is_occupied(&self, p: &Vector3<f64>) -> bool {
        self.cell_of(p).is_some_and(|i| self.occupied[i])
    }

    fn classify(&mut self) {
        if self.refreshes == 0 {
            self.occupied.fill(true);
            return;
        }
        let mean = self.cache.iter().sum::<f64>() / self.cache.len() as f64;
        let cut = mean.min(self.config.threshold);
        for (o, &c) in self.occupied.iter_mut().zip(&self.cache) {
            *o = c > cut;
        }
    }

    /// Decays the cache and folds in the field's density at one jittered
    /// point per cell. The jitter stream is `(seed, stream)`.
    pub fn refresh(&mut self, field: &RadianceField, seed: u64, stream: u64) {
        let r = self.config.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let points: Vec<Vector3<f64>> = (0..self.cache.len())
            .map(|i| {
                let cell = [i % r, (i / r) % r, i / (r * r)];
                Vector3::from_fn(|axis, _| {
                    let u = (cell[axis] as f64 + rng.random::<f64>()) / r as f64;
                    self.bounds.min[axis] + u * self.bounds.extent(axis)
                })
            })
            .collect();
        let densities: Vec<f64> = points
            .par_chunks(REFRESH_CHUNK)
            .flat_map_iter(|chunk| {
                let pass = field.density_pass(chunk.to_vec());
                (0..pass.len()).map(move |k| pass.density(k))
            })
            .collect();
        let decay = self.config.decay;
        for (c, d) in self.cache.iter_mut().zip(densities) {
            *c = (*c * decay).max(d);
        }
        self.refreshes += 1;
        self.classify();
    }
}
