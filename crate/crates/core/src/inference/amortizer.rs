//! Multilayer perceptron that predicts per-image variational parameters
//! from the embedding and covariates.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::inference::state::INIT_LOG_SCALE;
use crate::kernel::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// in × out
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// ReLU hidden layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(input: usize, width: usize, depth: usize, output: usize) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Mlp { layers }
    }

    /// He-normal hidden weights; a small output layer whose log-scale bias
    /// starts at ln 0.1 to match the explicit local initialization.
    pub fn initialize(input: usize, width: usize, depth: usize, k_free: usize, rng: &mut RngStream) -> Self {
        let mut mlp = Mlp::zeros(input, width, depth, 2 * k_free);
        let last = mlp.layers.len() - 1;
        for (l, layer) in mlp.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.nrows().max(1) as f64;
            let sd = if l == last { 0.01 / fan_in.sqrt() } else { (2.0 / fan_in).sqrt() };
            layer.weight.iter_mut().for_each(|w| *w = sd * rng.standard_normal());
        }
        mlp.layers[last]
            .bias
            .slice_mut(s![k_free..])
            .fill(INIT_LOG_SCALE);
        mlp
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    /// Forward pass keeping the input of every layer for the backward pass.
    pub(crate) fn forward_cached(&self, input: ArrayView2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = input.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = h.dot(&layer.weight);
            out += &layer.bias;
            if l < last {
                out.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(h);
            h = out;
        }
        (h, acts)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(input).0
    }

    /// Gradient of Σ grad_out ⊙ output w.r.t. every weight and bias.
    pub(crate) fn backward(&self, acts: &[Array2<f64>], grad_out: Array2<f64>) -> Mlp {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &acts[l];
            grads.push(Dense {
                weight: a.t().dot(&g).as_standard_layout().into_owned(),
                bias: g.sum_axis(Axis(0)),
            });
            if l > 0 {
                let mut gin = g.dot(&layer.weight.t());
                // a is the post-ReLU activation of layer l−1
                gin.zip_mut_with(a, |gi, &ai| {
                    if ai <= 0.0 {
                        *gi = 0.0
                    }
                });
                g = gin;
            }
        }
        grads.reverse();
        Mlp { layers: grads }
    }

    pub(crate) fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

/// Network input rows `[z_i, x_i]`.
pub(crate) fn amortizer_input(z: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[z, x]).expect("row counts agree")
}

/// Predicted (λ_θ, ν_θ) for one image; ν = exp of the second output half.
pub fn amortize_forward(omega: &Mlp, z: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("amortizer input", omega.input_dim(), z.len() + x.len())?;
    let input = amortizer_input(
        ArrayView1::from(z).insert_axis(Axis(0)),
        ArrayView1::from(x).insert_axis(Axis(0)),
    );
    let out = omega.forward(input.view());
    let km = omega.output_dim() / 2;
    let row = out.row(0);
    let loc = row.slice(s![..km]).to_vec();
    let scale = row.slice(s![km..]).iter().map(|v| v.exp()).collect();
    Ok((loc, scale))
}
