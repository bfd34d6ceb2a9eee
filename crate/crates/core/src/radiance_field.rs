//! Conditioned radiance field `(x, d, f_l, f_e) -> (c, σ)`.
//!
//! Position goes through the tri-plane encoder and a density network that
//! emits a density pre-activation plus a geometry feature. The color
//! network sees `[geometry | SH(d) | f_l | f_e]`. Density uses a clamped
//! exponential, color a sigmoid.
//!
//! Evaluation is split in two passes so the renderer can skip the color
//! network for samples hidden behind opaque ones.

use nalgebra::Vector3;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Aabb;
use crate::error::{ensure_len, Error, Result};
use crate::hash_encoding::{GridConfig, TriPlaneEncoder};
use crate::nn::{Mlp, MlpTape};
use crate::occupancy::OccupancyGrid;

/// Number of degree-4 spherical-harmonic components.
pub const SH_DIM: usize = 16;

/// Tolerance on `|d| = 1` accepted by [`RadianceField::eval_field`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Real spherical harmonics up to degree 3 (four bands) of a unit vector.
pub fn sh_encode(d: &Vector3<f64>) -> [f64; SH_DIM] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        0.282_094_791_773_878_14,
        -0.488_602_511_902_919_87 * y,
        0.488_602_511_902_919_87 * z,
        -0.488_602_511_902_919_87 * x,
        1.092_548_430_592_079_2 * x * y,
        -1.092_548_430_592_079_2 * y * z,
        0.946_174_695_757_559_97 * zz - 0.315_391_565_252_519_99,
        -1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_59 * (xx - yy),
        -0.590_043_589_926_643_52 * y * (3.0 * xx - yy),
        2.890_611_442_640_553_8 * x * y * z,
        0.457_045_799_464_465_72 * y * (1.0 - 5.0 * zz),
        0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0),
        0.457_045_799_464_465_72 * x * (1.0 - 5.0 * zz),
        1.445_305_721_320_276_9 * z * (xx - yy),
        0.590_043_589_926_643_52 * x * (3.0 * yy - xx),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: GridConfig,
    pub bounds: Aabb,
    pub hidden_width: usize,
    pub density_hidden_layers: usize,
    pub color_hidden_layers: usize,
    pub geo_features: usize,
    pub lip_width: usize,
    pub expr_width: usize,
    pub density_max: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            bounds: Aabb::default(),
            hidden_width: 64,
            density_hidden_layers: 2,
            color_hidden_layers: 2,
            geo_features: 15,
            lip_width: 32,
            expr_width: 7,
            density_max: 1e4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        Aabb::new(self.bounds.min, self.bounds.max)?;
        if self.hidden_width == 0 && (self.density_hidden_layers > 0 || self.color_hidden_layers > 0) {
            return Err(Error::invalid("field config", "hidden_width must be positive"));
        }
        if !(self.density_max > 0.0) {
            return Err(Error::invalid("field config", "density_max must be positive"));
        }
        Ok(())
    }

    pub fn color_input_dim(&self) -> usize {
        self.geo_features + SH_DIM + self.lip_width + self.expr_width
    }

    fn widths(&self, input: usize, hidden_layers: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(self.hidden_width, hidden_layers));
        w.push(output);
        w
    }
}

/// Lip and expression conditioning vectors for one frame.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditioningFeatures {
    pub lip: Vec<f64>,
    pub expr: Vec<f64>,
}

impl ConditioningFeatures {
    pub fn zeros(lip_width: usize, expr_width: usize) -> Self {
        Self {
            lip: vec![0.0; lip_width],
            expr: vec![0.0; expr_width],
        }
    }

    pub fn validate_for(&self, config: &FieldConfig) -> Result<()> {
        ensure_len("lip feature", config.lip_width, self.lip.len())?;
        ensure_len("expression feature", config.expr_width, self.expr.len())?;
        if self.lip.iter().chain(&self.expr).any(|v| !v.is_finite()) {
            return Err(Error::invalid("conditioning", "non-finite value"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub color: [f64; 3],
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    pub encoder: TriPlaneEncoder,
    pub density_net: Mlp,
    pub color_net: Mlp,
    /// Empty-space skipping used by the renderer, if any.
    pub occupancy: Option<OccupancyGrid>,
}

/// Gradients with the same layout as the field's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradients {
    pub tables: [Vec<f64>; 3],
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl FieldGradients {
    pub fn zeros_like(field: &RadianceField) -> Self {
        Self {
            tables: field.encoder.table_lens().map(|n| vec![0.0; n]),
            density: vec![0.0; field.density_net.params().len()],
            color: vec![0.0; field.color_net.params().len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.tables.iter_mut().for_each(|t| t.fill(0.0));
        self.density.fill(0.0);
        self.color.fill(0.0);
    }

    pub fn add_assign(&mut self, other: &FieldGradients) {
        for (a, b) in self.tables.iter_mut().zip(&other.tables) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.density.iter_mut().zip(&other.density).for_each(|(x, y)| *x += y);
        self.color.iter_mut().zip(&other.color).for_each(|(x, y)| *x += y);
    }

    pub fn scale(&mut self, k: f64) {
        self.tables.iter_mut().flatten().for_each(|v| *v *= k);
        self.density.iter_mut().for_each(|v| *v *= k);
        self.color.iter_mut().for_each(|v| *v *= k);
    }

    /// Every gradient component, tables first.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tables
            .iter()
            .flatten()
            .chain(self.density.iter())
            .chain(self.color.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Gradients with respect to the field's inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldInputGradients {
    /// One per density-pass sample.
    pub positions: Vec<Vector3<f64>>,
    /// One row per color-pass sample.
    pub direction_embedding: Array2<f64>,
    /// Summed over color-pass samples.
    pub lip: Vec<f64>,
    pub expr: Vec<f64>,
}

/// Saved state of the density network over a batch of positions.
#[derive(Clone, Debug)]
pub struct DensityPass {
    positions: Vec<Vector3<f64>>,
    tape: MlpTape,
    /// Raw outputs: column 0 is the density pre-activation.
    raw: Array2<f64>,
    density_max: f64,
}

impl DensityPass {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn density(&self, i: usize) -> f64 {
        density_activation(self.raw[[i, 0]], self.density_max).0
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }
}

/// Saved state of the color network over a subset of density samples.
#[derive(Clone, Debug)]
pub struct ColorPass {
    /// Index into the density pass of each row.
    rows: Vec<usize>,
    tape: MlpTape,
    rgb: Array2<f64>,
}

impl ColorPass {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn color(&self, row: usize) -> [f64; 3] {
        [self.rgb[[row, 0]], self.rgb[[row, 1]], self.rgb[[row, 2]]]
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
}

fn density_activation(raw: f64, max: f64) -> (f64, f64) {
    let e = raw.exp();
    if e < max {
        (e, e)
    } else {
        (max, 0.0)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl RadianceField {
    /// Field with every parameter zero.
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let encoder = TriPlaneEncoder::new(config.grid, config.bounds)?;
        let density_net = Mlp::new(&config.widths(
            encoder.output_dim(),
            config.density_hidden_layers,
            1 + config.geo_features,
        ))?;
        let color_net = Mlp::new(&config.widths(config.color_input_dim(), config.color_hidden_layers, 3))?;
        Ok(Self {
            config,
            encoder,
            density_net,
            color_net,
            occupancy: None,
        })
    }

    /// Tables uniform in `[-1e-4, 1e-4]`, networks Kaiming-uniform.
    pub fn new<R: Rng>(config: FieldConfig, rng: &mut R) -> Result<Self> {
        let mut field = Self::zeros(config)?;
        field.encoder.init_uniform(rng, 1e-4);
        field.density_net.init(rng);
        field.color_net.init(rng);
        Ok(field)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.encoder.table_lens().iter().sum::<usize>()
            + self.density_net.params().len()
            + self.color_net.params().len()
    }

    pub fn density_pass(&self, positions: Vec<Vector3<f64>>) -> DensityPass {
        let width = self.encoder.output_dim();
        let mut encoded = Array2::zeros((positions.len(), width));
        for (mut row, x) in encoded.axis_iter_mut(Axis(0)).zip(&positions) {
            self.encoder
                .encode_into(x, row.as_slice_mut().expect("standard layout"));
        }
        let (raw, tape) = self.density_net.forward(encoded);
        DensityPass {
            positions,
            tape,
            raw,
            density_max: self.config.density_max,
        }
    }

    /// Runs the color network on `rows` of `density`, with one direction per
    /// row and conditioning shared by the batch.
    pub fn color_pass(
        &self,
        density: &DensityPass,
        rows: Vec<usize>,
        directions: &[Vector3<f64>],
        cond: &ConditioningFeatures,
    ) -> ColorPass {
        assert_eq!(rows.len(), directions.len(), "one direction per color row");
        let g = self.config.geo_features;
        let (lw, ew) = (self.config.lip_width, self.config.expr_width);
        let mut input = Array2::zeros((rows.len(), self.config.color_input_dim()));
        for (k, (&r, d)) in rows.iter().zip(directions).enumerate() {
            let mut row = input.row_mut(k);
            let row = row.as_slice_mut().expect("standard layout");
            for j in 0..g {
                row[j] = density.raw[[r, 1 + j]];
            }
            row[g..g + SH_DIM].copy_from_slice(&sh_encode(d));
            row[g + SH_DIM..g + SH_DIM + lw].copy_from_slice(&cond.lip);
            row[g + SH_DIM + lw..g + SH_DIM + lw + ew].copy_from_slice(&cond.expr);
        }
        let (mut rgb, tape) = self.color_net.forward(input);
        rgb.mapv_inplace(sigmoid);
        ColorPass { rows, tape, rgb }
    }

    /// Backpropagates `d_density` (one per density sample) and `d_rgb` (one
    /// row per color sample) into `grads`, returning input gradients.
    pub fn backward(
        &self,
        density: &DensityPass,
        color: &ColorPass,
        d_density: &[f64],
        d_rgb: &Array2<f64>,
        grads: &mut FieldGradients,
    ) -> FieldInputGradients {
        assert_eq!(d_density.len(), density.len());
        assert_eq!(d_rgb.nrows(), color.len());
        let g = self.config.geo_features;
        let (lw, ew) = (self.config.lip_width, self.config.expr_width);

        let mut dz = d_rgb.clone();
        ndarray::Zip::from(&mut dz)
            .and(&color.rgb)
            .for_each(|d, &c| *d *= c * (1.0 - c));
        let d_color_in = if color.is_empty() {
            Array2::zeros((0, self.config.color_input_dim()))
        } else {
            self.color_net.backward(&color.tape, dz, &mut grads.color)
        };

        let mut d_raw = Array2::zeros(density.raw.raw_dim());
        for (i, &ds) in d_density.iter().enumerate() {
            let (_, slope) = density_activation(density.raw[[i, 0]], density.density_max);
            d_raw[[i, 0]] = ds * slope;
        }
        for (k, &r) in color.rows.iter().enumerate() {
            for j in 0..g {
                d_raw[[r, 1 + j]] += d_color_in[[k, j]];
            }
        }
        let mut lip = vec![0.0; lw];
        let mut expr = vec![0.0; ew];
        for row in d_color_in.axis_iter(Axis(0)) {
            for j in 0..lw {
                lip[j] += row[g + SH_DIM + j];
            }
            for j in 0..ew {
                expr[j] += row[g + SH_DIM + lw + j];
            }
        }
        let direction_embedding = d_color_in.slice(s![.., g..g + SH_DIM]).to_owned();

        let d_encoded = if density.is_empty() {
            Array2::zeros((0, self.encoder.output_dim()))
        } else {
            self.density_net.backward(&density.tape, d_raw, &mut grads.density)
        };
        let positions = density
            .positions
            .iter()
            .zip(d_encoded.axis_iter(Axis(0)))
            .map(|(x, up)| {
                let up = up.as_slice().expect("standard layout");
                if up.iter().all(|&v| v == 0.0) {
                    Vector3::zeros()
                } else {
                    self.encoder.backward_into(x, up, &mut grads.tables)
                }
            })
            .collect();
        FieldInputGradients {
            positions,
            direction_embedding,
            lip,
            expr,
        }
    }

    fn check_inputs(&self, d: &Vector3<f64>, cond: &ConditioningFeatures) -> Result<()> {
        let n = d.norm();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::NonUnitDirection(n));
        }
        cond.validate_for(&self.config)
    }

    pub fn eval_field(
        &self,
        x: &Vector3<f64>,
        d: &Vector3<f64>,
        cond: &ConditioningFeatures,
    ) -> Result<FieldSample> {
        self.check_inputs(d, cond)?;
        let dp = self.density_pass(vec![*x]);
        let cp = self.color_pass(&dp, vec![0], &[*d], cond);
        Ok(FieldSample {
            color: cp.color(0),
            density: dp.density(0),
        })
    }

    /// Gradients of `d_color · c + d_density · σ` at one sample.
    pub fn eval_field_backward(
        &self,
        x: &Vector3<f64>,
        d: &Vector3<f64>,
        cond: &ConditioningFeatures,
        d_color: [f64; 3],
        d_density: f64,
    ) -> Result<(FieldGradients, FieldInputGradients)> {
        self.check_inputs(d, cond)?;
        let dp = self.density_pass(vec![*x]);
        let cp = self.color_pass(&dp, vec![0], &[*d], cond);
        let mut grads = FieldGradients::zeros_like(self);
        let d_rgb = Array2::from_shape_vec((1, 3), d_color.to_vec()).expect("1x3");
        let inputs = self.backward(&dp, &cp, &[d_density], &d_rgb, &mut grads);
        Ok((grads, inputs))
    }

    /// Visits every parameter group mutably, tables first.
    pub fn param_groups_mut(&mut self) -> [&mut [f64]; 5] {
        let [a, b, c] = &mut self.encoder.planes;
        [
            a.tables_mut(),
            b.tables_mut(),
            c.tables_mut(),
            self.density_net.params_mut(),
            self.color_net.params_mut(),
        ]
    }

    pub fn param_groups(&self) -> [&[f64]; 5] {
        let [a, b, c] = &self.encoder.planes;
        [
            a.tables(),
            b.tables(),
            c.tables(),
            self.density_net.params(),
            self.color_net.params(),
        ]
    }
}

impl FieldGradients {
    pub fn groups(&self) -> [&[f64]; 5] {
        [
            &self.tables[0],
            &self.tables[1],
            &self.tables[2],
            &self.density,
            &self.color,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn mini_config() -> FieldConfig {
        FieldConfig {
            grid: GridConfig::with_top_resolution(4, 2, 10, 4, 24),
            hidden_width: 16,
            density_hidden_layers: 1,
            color_hidden_layers: 1,
            geo_features: 4,
            lip_width: 5,
            expr_width: 3,
            ..FieldConfig::default()
        }
    }

    fn cond(c: &FieldConfig, seed: u64) -> ConditioningFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditioningFeatures {
            lip: (0..c.lip_width).map(|_| rng.random_range(-1.0..1.0)).collect(),
            expr: (0..c.expr_width).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn sh_band_zero_and_orthogonality_sanity() {
        let e = sh_encode(&Vector3::new(0.0, 0.0, 1.0));
        assert_close!(e[0], 0.282_094_791_773_878_14, 0.0);
        assert_close!(e[2], 0.488_602_511_902_919_87, 1e-15);
        // Monte Carlo check that the basis is orthonormal on the sphere.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200_000;
        let mut gram = [[0.0; SH_DIM]; SH_DIM];
        for _ in 0..n {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1.0 || v.norm() < 1e-3 {
                continue;
            }
            let y = sh_encode(&v.normalize());
            for i in 0..SH_DIM {
                for j in 0..SH_DIM {
                    gram[i][j] += y[i] * y[j];
                }
            }
        }
        let total: f64 = gram[0][0] / (0.282_094_791_773_878_14f64.powi(2));
        for i in 0..SH_DIM {
            for j in 0..SH_DIM {
                let v = gram[i][j] / total * 4.0 * std::f64::consts::PI;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 0.03, "gram[{i}][{j}] = {v}");
            }
        }
    }

    #[test]
    fn zero_weights_give_unit_density_and_gray() {
        let field = RadianceField::zeros(FieldConfig::default()).unwrap();
        let c = ConditioningFeatures::zeros(32, 7);
        let out = field
            .eval_field(&Vector3::new(0.1, 0.2, 0.3), &Vector3::new(0.0, 0.0, 1.0), &c)
            .unwrap();
        assert_eq!(out.density, 1.0);
        assert_eq!(out.color, [0.5; 3]);
    }

    #[test]
    fn rejects_non_unit_direction() {
        let field = RadianceField::zeros(mini_config()).unwrap();
        let c = ConditioningFeatures::zeros(5, 3);
        let err = field.eval_field(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.1), &c);
        assert!(matches!(err, Err(Error::NonUnitDirection(_))));
        let err = field.eval_field(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0), &ConditioningFeatures::zeros(4, 3));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let config = mini_config();
        let field = RadianceField::new(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = cond(&config, 1);
        let x = Vector3::new(0.05, -0.2, 0.31);
        let d = Vector3::new(0.3, -0.4, 0.5).normalize();
        let a = field.eval_field(&x, &d, &c).unwrap();
        let b = field.eval_field(&x, &d, &c).unwrap();
        assert_eq!(a, b);
        assert!(a.density >= 0.0);
        assert!(a.color.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn density_clamps_at_maximum() {
        let config = mini_config();
        let mut field = RadianceField::zeros(config).unwrap();
        let last = field.density_net.num_layers() - 1;
        field.density_net.layer_mut(last).1[0] = 50.0;
        let c = ConditioningFeatures::zeros(5, 3);
        let out = field.eval_field(&Vector3::zeros(), &Vector3::z(), &c).unwrap();
        assert_eq!(out.density, 1e4);
        let (g, _) = field
            .eval_field_backward(&Vector3::zeros(), &Vector3::z(), &c, [0.0; 3], 1.0)
            .unwrap();
        assert!(g.density.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = mini_config();
        let field = RadianceField::new(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (g, inp) = field
            .eval_field_backward(&Vector3::new(0.1, 0.0, 0.0), &Vector3::z(), &cond(&config, 2), [0.0; 3], 0.0)
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert_eq!(inp.positions[0], Vector3::zeros());
        assert!(inp.lip.iter().chain(&inp.expr).all(|&v| v == 0.0));
    }
}
