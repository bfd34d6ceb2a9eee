//! Multiresolution 2D hash grids and the tri-plane positional encoder.
//!
//! Each level is a virtual lattice with `resolution(l)` points per axis. A
//! query in the unit square is scaled by `resolution(l) - 1`, the four
//! surrounding lattice points are looked up in the level's table and
//! bilinearly interpolated. Levels are concatenated coarse to fine.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Aabb;
use crate::error::{ensure_len, Error, Result};

/// Second multiplier of the spatial hash; the first coordinate uses 1.
pub const HASH_PRIME: u32 = 2_654_435_761;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub levels: usize,
    pub features_per_entry: usize,
    pub table_size_log2: u32,
    pub base_resolution: u32,
    pub growth_factor: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::with_top_resolution(14, 1, 14, 16, 512)
    }
}

impl GridConfig {
    /// Picks the growth factor so the finest level has `top` lattice points.
    pub fn with_top_resolution(
        levels: usize,
        features_per_entry: usize,
        table_size_log2: u32,
        base_resolution: u32,
        top: u32,
    ) -> Self {
        let growth_factor = if levels > 1 {
            (top as f64 / base_resolution as f64).powf(1.0 / (levels - 1) as f64)
        } else {
            1.0
        };
        Self {
            levels,
            features_per_entry,
            table_size_log2,
            base_resolution,
            growth_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("hash grid config", reason));
        if self.levels == 0 || self.features_per_entry == 0 {
            return bad(format!(
                "levels ({}) and features_per_entry ({}) must be positive",
                self.levels, self.features_per_entry
            ));
        }
        if !(1..=24).contains(&self.table_size_log2) {
            return bad(format!("table_size_log2 {} outside 1..=24", self.table_size_log2));
        }
        if self.base_resolution < 2 {
            return bad(format!("base_resolution {} < 2", self.base_resolution));
        }
        if !(self.growth_factor >= 1.0 && self.growth_factor.is_finite()) {
            return bad(format!("growth_factor {} must be >= 1", self.growth_factor));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_entry
    }

    /// Lattice points per axis at `level`.
    pub fn resolution(&self, level: usize) -> u32 {
        // The epsilon keeps exact products such as 16 * 32^(13/13) from
        // flooring one short.
        let r = self.base_resolution as f64 * self.growth_factor.powi(level as i32);
        (r + 1e-9).floor() as u32
    }
}

/// Table slot of lattice point `cell` on a level with `resolution` points
/// per axis. Dense row-major when the level fits in the table, otherwise
/// the XOR-of-multiplied-coordinates spatial hash.
pub fn hash_index(resolution: u32, cell: [u32; 2], table_size_log2: u32) -> usize {
    let size = 1u64 << table_size_log2;
    let mask = (size - 1) as u32;
    if (resolution as u64) * (resolution as u64) <= size {
        (cell[1] as usize) * (resolution as usize) + cell[0] as usize
    } else {
        (cell[0] ^ cell[1].wrapping_mul(HASH_PRIME)) as usize & mask as usize
    }
}

/// Rounds lattice coordinates within a few ulps of a vertex onto it, so
/// `i / (r - 1)` queries hit the stored entry exactly.
fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() <= 8.0 * f64::EPSILON * r.abs().max(1.0) {
        r
    } else {
        p
    }
}

#[derive(Clone, Copy, Debug)]
struct Corner {
    index: usize,
    weight: f64,
    d_weight_da: f64,
    d_weight_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid2D {
    config: GridConfig,
    resolutions: Vec<u32>,
    /// `levels × table_size × features_per_entry`, level-major.
    tables: Vec<f64>,
}

impl HashGrid2D {
    /// All table entries zero.
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let resolutions: Vec<u32> = (0..config.levels).map(|l| config.resolution(l)).collect();
        if resolutions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("hash grid config", "resolutions decrease"));
        }
        let len = config.levels * config.table_size() * config.features_per_entry;
        Ok(Self {
            config,
            resolutions,
            tables: vec![0.0; len],
        })
    }

    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for v in &mut self.tables {
            *v = rng.random_range(-scale..=scale);
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn resolution(&self, level: usize) -> u32 {
        self.resolutions[level]
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn tables(&self) -> &[f64] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [f64] {
        &mut self.tables
    }

    pub fn set_tables(&mut self, tables: Vec<f64>) -> Result<()> {
        ensure_len("hash table", self.tables.len(), tables.len())?;
        if tables.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("hash table", "non-finite entry"));
        }
        self.tables = tables;
        Ok(())
    }

    pub fn hash_index(&self, level: usize, cell: [u32; 2]) -> usize {
        hash_index(self.resolutions[level], cell, self.config.table_size_log2)
    }

    /// Offset of an entry's first feature in the flat table vector.
    pub fn entry_offset(&self, level: usize, slot: usize) -> usize {
        (level * self.config.table_size() + slot) * self.config.features_per_entry
    }

    /// Entry stored for lattice point `cell` at `level`.
    pub fn entry(&self, level: usize, cell: [u32; 2]) -> &[f64] {
        let off = self.entry_offset(level, self.hash_index(level, cell));
        &self.tables[off..off + self.config.features_per_entry]
    }

    fn corners(&self, level: usize, a: f64, b: f64) -> [Corner; 4] {
        let r = self.resolutions[level];
        let scale = (r - 1) as f64;
        let (pa, pb) = (snap(a * scale), snap(b * scale));
        let max_cell = (r - 2) as f64;
        let ia = pa.floor().clamp(0.0, max_cell);
        let ib = pb.floor().clamp(0.0, max_cell);
        let (fa, fb) = (pa - ia, pb - ib);
        let (ia, ib) = (ia as u32, ib as u32);
        let slot = |da: u32, db: u32| {
            self.entry_offset(level, self.hash_index(level, [ia + da, ib + db]))
        };
        [
            Corner {
                index: slot(0, 0),
                weight: (1.0 - fa) * (1.0 - fb),
                d_weight_da: -(1.0 - fb) * scale,
                d_weight_db: -(1.0 - fa) * scale,
            },
            Corner {
                index: slot(1, 0),
                weight: fa * (1.0 - fb),
                d_weight_da: (1.0 - fb) * scale,
                d_weight_db: -fa * scale,
            },
            Corner {
                index: slot(0, 1),
                weight: (1.0 - fa) * fb,
                d_weight_da: -fb * scale,
                d_weight_db: (1.0 - fa) * scale,
            },
            Corner {
                index: slot(1, 1),
                weight: fa * fb,
                d_weight_da: fb * scale,
                d_weight_db: fa * scale,
            },
        ]
    }

    /// Writes the `L×D` encoding of `(a, b)` into `out`.
    pub fn encode_into(&self, a: f64, b: f64, out: &mut [f64]) {
        let d = self.config.features_per_entry;
        debug_assert_eq!(out.len(), self.output_dim());
        for level in 0..self.config.levels {
            let dst = &mut out[level * d..(level + 1) * d];
            dst.fill(0.0);
            for c in self.corners(level, a, b) {
                let src = &self.tables[c.index..c.index + d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += c.weight * s;
                }
            }
        }
    }

    pub fn encode(&self, a: f64, b: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(a, b, &mut out);
        out
    }

    /// Accumulates `upstream · ∂encode/∂tables` into `table_grad` (same
    /// layout as the tables) and returns `upstream · ∂encode/∂(a, b)`.
    pub fn backward(&self, a: f64, b: f64, upstream: &[f64], table_grad: &mut [f64]) -> [f64; 2] {
        let d = self.config.features_per_entry;
        let mut da = 0.0;
        let mut db = 0.0;
        for level in 0..self.config.levels {
            let up = &upstream[level * d..(level + 1) * d];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            for c in self.corners(level, a, b) {
                let entry = &self.tables[c.index..c.index + d];
                let mut dot = 0.0;
                for k in 0..d {
                    table_grad[c.index + k] += c.weight * up[k];
                    dot += entry[k] * up[k];
                }
                da += c.d_weight_da * dot;
                db += c.d_weight_db * dot;
            }
        }
        [da, db]
    }
}

/// Which normalized coordinates feed each plane, in output order.
pub const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [1, 2], [0, 2]];

#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneEncoder {
    /// `H^XY`, `H^YZ`, `H^XZ`.
    pub planes: [HashGrid2D; 3],
    pub bounds: Aabb,
}

/// One nonzero table-gradient entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableGradEntry {
    pub plane: usize,
    /// Flat index into the plane's table vector.
    pub index: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeGradients {
    pub tables: Vec<TableGradEntry>,
    pub position: Vector3<f64>,
}

impl TriPlaneEncoder {
    pub fn new(config: GridConfig, bounds: Aabb) -> Result<Self> {
        let grid = HashGrid2D::new(config)?;
        Ok(Self {
            planes: [grid.clone(), grid.clone(), grid],
            bounds,
        })
    }

    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for p in &mut self.planes {
            p.init_uniform(rng, scale);
        }
    }

    pub fn config(&self) -> &GridConfig {
        self.planes[0].config()
    }

    pub fn plane_dim(&self) -> usize {
        self.planes[0].output_dim()
    }

    pub fn output_dim(&self) -> usize {
        3 * self.plane_dim()
    }

    pub fn encode_into(&self, x: &Vector3<f64>, out: &mut [f64]) {
        let (n, _) = self.bounds.normalize(x);
        let pd = self.plane_dim();
        for (p, axes) in PLANE_AXES.iter().enumerate() {
            self.planes[p].encode_into(n[axes[0]], n[axes[1]], &mut out[p * pd..(p + 1) * pd]);
        }
    }

    pub fn encode(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out);
        out
    }

    /// Accumulates table gradients into the per-plane dense buffers and
    /// returns the gradient with respect to `x`. Coordinates clamped to the
    /// box get zero position gradient.
    pub fn backward_into(
        &self,
        x: &Vector3<f64>,
        upstream: &[f64],
        table_grads: &mut [Vec<f64>; 3],
    ) -> Vector3<f64> {
        let (n, inside) = self.bounds.normalize(x);
        let pd = self.plane_dim();
        let mut dn = [0.0; 3];
        for (p, axes) in PLANE_AXES.iter().enumerate() {
            let g = self.planes[p].backward(
                n[axes[0]],
                n[axes[1]],
                &upstream[p * pd..(p + 1) * pd],
                &mut table_grads[p],
            );
            dn[axes[0]] += g[0];
            dn[axes[1]] += g[1];
        }
        Vector3::from_fn(|i, _| {
            if inside[i] {
                dn[i] / self.bounds.extent(i)
            } else {
                0.0
            }
        })
    }

    /// Exact gradients of `upstream · encode(x)` with respect to the tables
    /// (sparse) and to `x`.
    pub fn encode_gradients(&self, x: &Vector3<f64>, upstream: &[f64]) -> Result<EncodeGradients> {
        ensure_len("encoder upstream gradient", self.output_dim(), upstream.len())?;
        let (n, inside) = self.bounds.normalize(x);
        let pd = self.plane_dim();
        let d = self.config().features_per_entry;
        let mut out = EncodeGradients::default();
        let mut dn = [0.0; 3];
        for (p, axes) in PLANE_AXES.iter().enumerate() {
            let grid = &self.planes[p];
            let up = &upstream[p * pd..(p + 1) * pd];
            for level in 0..grid.config.levels {
                let lu = &up[level * d..(level + 1) * d];
                for c in grid.corners(level, n[axes[0]], n[axes[1]]) {
                    let entry = &grid.tables[c.index..c.index + d];
                    let mut dot = 0.0;
                    for k in 0..d {
                        let value = c.weight * lu[k];
                        if value != 0.0 {
                            out.tables.push(TableGradEntry {
                                plane: p,
                                index: c.index + k,
                                value,
                            });
                        }
                        dot += entry[k] * lu[k];
                    }
                    dn[axes[0]] += c.d_weight_da * dot;
                    dn[axes[1]] += c.d_weight_db * dot;
                }
            }
        }
        out.position = Vector3::from_fn(|i, _| {
            if inside[i] {
                dn[i] / self.bounds.extent(i)
            } else {
                0.0
            }
        });
        Ok(out)
    }

    pub fn table_lens(&self) -> [usize; 3] {
        [0, 1, 2].map(|p| self.planes[p].tables().len())
    }
}
