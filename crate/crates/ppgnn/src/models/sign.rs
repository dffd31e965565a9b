//! SIGN: one learned transform per hop, concatenated, then an MLP.
//!
//! `z_r = relu(hops[r] * W_r + b_r)` for every hop, dropout on each hidden
//! activation in train mode, `logits = MLP(concat(z_0..z_R))`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

use super::common::{
    dropout_backward_inplace, dropout_inplace, relu_backward_from_output, relu_inplace, Linear,
};

// dropout stream tags; hop transforms and MLP layers draw distinct masks
const TAG_HOP: u64 = 0x1000;
const TAG_MLP: u64 = 0x2000;

#[derive(Debug, Clone)]
pub struct SignParams<T: Scalar> {
    /// Per-hop transforms, each `F -> d`.
    pub hop_layers: Vec<Linear<T>>,
    /// MLP over the concatenation: `d*(R+1) -> d -> C`.
    pub mlp: Vec<Linear<T>>,
    pub dropout: f64,
}

#[derive(Debug)]
pub struct SignTape<T: Scalar> {
    /// Post-ReLU (and dropout) hop activations.
    hop_z: Vec<Matrix<T>>,
    /// Input consumed by each MLP layer; `[0]` is the concatenation.
    mlp_inputs: Vec<Matrix<T>>,
    train_mode: bool,
    dropout_seed: u64,
}

impl<T: Scalar> SignParams<T> {
    pub fn init(
        feature_dim: usize,
        num_classes: usize,
        num_hops: usize,
        hidden_dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hop_layers = (0..=num_hops)
            .map(|_| Linear::glorot(feature_dim, hidden_dim, rng))
            .collect();
        let mlp = vec![
            Linear::glorot(hidden_dim * (num_hops + 1), hidden_dim, rng),
            Linear::glorot(hidden_dim, num_classes, rng),
        ];
        SignParams {
            hop_layers,
            mlp,
            dropout,
        }
    }

    pub fn num_hops(&self) -> usize {
        self.hop_layers.len() - 1
    }

    pub fn hidden_dim(&self) -> usize {
        self.hop_layers[0].out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        SignParams {
            hop_layers: self
                .hop_layers
                .iter()
                .map(|l| Linear::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            mlp: self
                .mlp
                .iter()
                .map(|l| Linear::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            dropout: self.dropout,
        }
    }

    pub fn forward(
        &self,
        hops: &[Matrix<T>],
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<(Matrix<T>, SignTape<T>)> {
        if hops.len() != self.hop_layers.len() {
            return Err(Error::Shape(format!(
                "expected {} hop matrices, got {}",
                self.hop_layers.len(),
                hops.len()
            )));
        }
        let b = hops[0].rows();
        let d = self.hidden_dim();
        let rate = if train_mode { self.dropout } else { 0.0 };

        let mut hop_z = Vec::with_capacity(hops.len());
        for (r, (hop, layer)) in hops.iter().zip(&self.hop_layers).enumerate() {
            let mut z = layer.forward(hop);
            relu_inplace(&mut z);
            dropout_inplace(&mut z, rate, dropout_seed, TAG_HOP + r as u64);
            hop_z.push(z);
        }

        let mut concat = Matrix::zeros(b, d * hops.len());
        for (r, z) in hop_z.iter().enumerate() {
            for i in 0..b {
                concat.row_mut(i)[r * d..(r + 1) * d].copy_from_slice(z.row(i));
            }
        }

        let mut mlp_inputs = vec![concat];
        let last = self.mlp.len() - 1;
        for (l, layer) in self.mlp.iter().enumerate() {
            let input = mlp_inputs.last().expect("mlp input");
            let mut h = layer.forward(input);
            if l < last {
                relu_inplace(&mut h);
                dropout_inplace(&mut h, rate, dropout_seed, TAG_MLP + l as u64);
                mlp_inputs.push(h);
            } else {
                return Ok((
                    h,
                    SignTape {
                        hop_z,
                        mlp_inputs,
                        train_mode,
                        dropout_seed,
                    },
                ));
            }
        }
        unreachable!("mlp has at least one layer")
    }

    pub fn backward(
        &self,
        hops: &[Matrix<T>],
        tape: &SignTape<T>,
        dlogits: &Matrix<T>,
    ) -> SignParams<T> {
        let rate = if tape.train_mode { self.dropout } else { 0.0 };
        let d = self.hidden_dim();
        let mut grads = self.zeros_like();

        let mut delta = dlogits.clone();
        for l in (0..self.mlp.len()).rev() {
            let input = &tape.mlp_inputs[l];
            let (dw, db, dx) = self.mlp[l].backward(input, &delta);
            grads.mlp[l] = Linear { w: dw, b: db };
            delta = dx;
            if l > 0 {
                // input was relu+dropout output of layer l-1
                dropout_backward_inplace(&mut delta, rate, tape.dropout_seed, TAG_MLP + (l - 1) as u64);
                relu_backward_from_output(&mut delta, input);
            }
        }

        // split the concatenation gradient back into per-hop blocks
        let b = delta.rows();
        for (r, (hop, z)) in hops.iter().zip(&tape.hop_z).enumerate() {
            let mut dz = Matrix::zeros(b, d);
            for i in 0..b {
                dz.row_mut(i).copy_from_slice(&delta.row(i)[r * d..(r + 1) * d]);
            }
            dropout_backward_inplace(&mut dz, rate, tape.dropout_seed, TAG_HOP + r as u64);
            relu_backward_from_output(&mut dz, z);
            let (dw, db, _) = self.hop_layers[r].backward(hop, &dz);
            grads.hop_layers[r] = Linear { w: dw, b: db };
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_params(dropout: f64) -> SignParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        SignParams::init(5, 3, 2, 8, dropout, &mut rng)
    }

    fn small_hops(b: usize) -> Vec<Matrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..3)
            .map(|_| {
                Matrix::from_vec(
                    b,
                    5,
                    (0..b * 5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn mlp_input_width_matches_concat() {
        let p = small_params(0.0);
        assert_eq!(p.mlp[0].in_dim(), p.hidden_dim() * (p.num_hops() + 1));
    }

    #[test]
    fn forward_deterministic_given_seed() {
        let p = small_params(0.5);
        let hops = small_hops(4);
        let (a, _) = p.forward(&hops, true, 9).unwrap();
        let (b, _) = p.forward(&hops, true, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let (c, _) = p.forward(&hops, true, 10).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn eval_mode_ignores_dropout_seed() {
        let p = small_params(0.5);
        let hops = small_hops(4);
        let (a, _) = p.forward(&hops, false, 1).unwrap();
        let (b, _) = p.forward(&hops, false, 2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_gradients() {
        let p = small_params(0.3);
        let hops = small_hops(4);
        let (logits, tape) = p.forward(&hops, true, 5).unwrap();
        let dlogits = Matrix::zeros(logits.rows(), logits.cols());
        let grads = p.backward(&hops, &tape, &dlogits);
        for layer in grads.hop_layers.iter().chain(&grads.mlp) {
            assert!(layer.w.data().iter().all(|&v| v == 0.0));
            assert!(layer.b.iter().all(|&v| v == 0.0));
        }
    }
}
