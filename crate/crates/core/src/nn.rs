//! Dense feed-forward networks with a hand-written backward pass.
//!
//! Parameters live in one flat vector per network (`W` row-major
//! `out × in`, then `b`, layer after layer) so optimizers can treat the
//! whole network as a single tensor. Hidden layers use ReLU; the output
//! layer is linear and callers apply their own activation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{ensure_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`. All parameters start at zero.
    pub fn new(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("network widths", format!("{widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for w in widths.windows(2) {
            let l = LayerShape {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += l.weight_len() + l.outputs;
            layers.push(l);
        }
        Ok(Self {
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for l in self.layers.clone() {
            let bound = (6.0 / l.inputs as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let (w, b) = self.layer_slices_mut(&l);
            w.iter_mut().for_each(|v| *v = dist.sample(rng));
            b.fill(0.0);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        ensure_len("network parameters", self.params.len(), params.len())?;
        self.params = params;
        Ok(())
    }

    /// Weight matrix (`out × in`) and bias of layer `i`.
    pub fn layer(&self, i: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let l = &self.layers[i];
        let w = &self.params[l.offset..l.offset + l.weight_len()];
        let b = &self.params[l.offset + l.weight_len()..l.offset + l.weight_len() + l.outputs];
        (
            ArrayView2::from_shape((l.outputs, l.inputs), w).expect("layer shape"),
            ArrayView1::from(b),
        )
    }

    fn layer_slices_mut(&mut self, l: &LayerShape) -> (&mut [f64], &mut [f64]) {
        let (w, rest) = self.params[l.offset..].split_at_mut(l.weight_len());
        (w, &mut rest[..l.outputs])
    }

    /// Mutable view of layer `i`'s weights and bias.
    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let l = self.layers[i];
        self.layer_slices_mut(&l)
    }

    /// Forward pass over a batch (`rows × input_dim`). Returns the
    /// pre-activation output of the last layer and the tape.
    pub fn forward(&self, input: Array2<f64>) -> (Array2<f64>, MlpTape) {
        assert_eq!(input.ncols(), self.input_dim(), "network input width");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for i in 0..self.layers.len() {
            let (w, b) = self.layer(i);
            let mut z = x.dot(&w.t());
            z += &b;
            inputs.push(x);
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        (x, MlpTape { inputs })
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut x = input.to_owned();
        for i in 0..self.layers.len() {
            let (w, b) = self.layer(i);
            let mut z = x.dot(&w.t());
            z += &b;
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        x
    }

    /// Backward pass. Accumulates parameter gradients into `grad` (same
    /// layout as the parameters) and returns the gradient with respect to
    /// the network input.
    pub fn backward(&self, tape: &MlpTape, upstream: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        let mut dz = upstream;
        for i in (0..self.layers.len()).rev() {
            let l = self.layers[i];
            let x = &tape.inputs[i];
            let gw = dz.t().dot(x);
            let gb = dz.sum_axis(Axis(0));
            {
                let (gw_dst, gb_dst) = grad[l.offset..].split_at_mut(l.weight_len());
                for (d, s) in gw_dst.iter_mut().zip(gw.iter()) {
                    *d += s;
                }
                for (d, s) in gb_dst[..l.outputs].iter_mut().zip(gb.iter()) {
                    *d += s;
                }
            }
            let (w, _) = self.layer(i);
            let mut dx = dz.dot(&w);
            if i > 0 {
                // x is the ReLU output of the previous layer.
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            dz = dx;
        }
        dz
    }

    /// Single-row convenience forward.
    pub fn predict_one(&self, input: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
        self.predict(x).row(0).to_vec()
    }
}

/// Stacks equal-width rows into a batch matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let width = rows.first().map_or(0, Vec::len);
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&Array1::from(r.clone()));
    }
    m
}

/// Copies `src` into columns `start..start + src.ncols()` of `dst`.
pub fn write_columns(dst: &mut Array2<f64>, start: usize, src: ArrayView2<'_, f64>) {
    dst.slice_mut(s![.., start..start + src.ncols()]).assign(&src);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::new(&[4, 8, 3]).unwrap();
        let out = net.predict_one(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut net = Mlp::new(&[3, 2]).unwrap();
        net.init(&mut ChaCha8Rng::seed_from_u64(1));
        let x = array![[0.5, -1.0, 2.0]];
        let (_, tape) = net.forward(x.clone());
        let up = array![[1.5, -0.25]];
        let mut grad = vec![0.0; net.params().len()];
        let dx = net.backward(&tape, up.clone(), &mut grad);
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grad[o * 3 + i], up[[0, o]] * x[[0, i]]);
            }
            assert_eq!(grad[6 + o], up[[0, o]]);
        }
        let (w, _) = net.layer(0);
        for i in 0..3 {
            assert_close!(dx[[0, i]], up[[0, 0]] * w[[0, i]] + up[[0, 1]] * w[[1, i]], 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Mlp::new(&[5, 7, 6, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        net.init(&mut rng);
        for v in net.params_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.7).sin());
        let up = Array2::from_shape_fn((4, 2), |(i, j)| ((i * 2 + j) as f64 * 1.3).cos());
        let loss = |n: &Mlp, x: &Array2<f64>| (n.predict(x.view()) * &up).sum();
        let (_, tape) = net.forward(x.clone());
        let mut grad = vec![0.0; net.params().len()];
        let dx = net.backward(&tape, up.clone(), &mut grad);
        let h = 1e-6;
        for k in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let mut m = net.clone();
            m.params_mut()[k] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
        for i in 0..4 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn rejects_empty_widths() {
        assert!(Mlp::new(&[3]).is_err());
        assert!(Mlp::new(&[3, 0, 2]).is_err());
    }
}
