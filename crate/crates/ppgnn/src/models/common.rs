//! Shared building blocks: linear layers, ReLU, seeded dropout, softmax, init.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::{matmul, matmul_a_bt, matmul_at_b, Matrix, Scalar};

/// Fully connected layer, weights stored input-major (`in_dim x out_dim`).
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Matrix::zeros(in_dim, out_dim),
            b: vec![T::ZERO; out_dim],
        }
    }

    /// Glorot-uniform weights (`±sqrt(6 / (in + out))`), zero biases.
    /// Weight entries are drawn row-major so initialization is reproducible.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.random_range(-limit..limit)))
            .collect();
        Linear {
            w: Matrix::from_vec(in_dim, out_dim, data),
            b: vec![T::ZERO; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    /// `x * W + b`.
    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = matmul(x, &self.w);
        for i in 0..out.rows() {
            for (o, &bias) in out.row_mut(i).iter_mut().zip(&self.b) {
                *o += bias;
            }
        }
        out
    }

    /// Gradients of this layer: `(dW, db, dx)`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>) -> (Matrix<T>, Vec<T>, Matrix<T>) {
        let dw = matmul_at_b(x, dy);
        let db = colsum(dy);
        let dx = matmul_a_bt(dy, &self.w);
        (dw, db, dx)
    }
}

pub fn colsum<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::ZERO; m.cols()];
    for i in 0..m.rows() {
        for (acc, &v) in out.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    out
}

pub fn relu_inplace<T: Scalar>(m: &mut Matrix<T>) {
    for v in m.data_mut() {
        *v = v.maximum(T::ZERO);
    }
}

/// Gradient through ReLU (and any preceding dropout), using the stored
/// post-activation values: positions at zero pass no gradient.
pub fn relu_backward_from_output<T: Scalar>(d: &mut Matrix<T>, output: &Matrix<T>) {
    for (g, &o) in d.data_mut().iter_mut().zip(output.data()) {
        if o <= T::ZERO {
            *g = T::ZERO;
        }
    }
}

fn dropout_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    // distinct streams per dropout site
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Inverted dropout with a mask fully determined by `(seed, tag, shape)`.
/// Mask draws are f64 so the f32 and f64 shadow paths drop the same entries.
pub fn dropout_inplace<T: Scalar>(m: &mut Matrix<T>, rate: f64, seed: u64, tag: u64) {
    if rate <= 0.0 {
        return;
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let mut rng = dropout_rng(seed, tag);
    for v in m.data_mut() {
        if rng.random::<f64>() < rate {
            *v = T::ZERO;
        } else {
            *v *= scale;
        }
    }
}

/// Replay the mask of [`dropout_inplace`] onto a gradient.
pub fn dropout_backward_inplace<T: Scalar>(d: &mut Matrix<T>, rate: f64, seed: u64, tag: u64) {
    dropout_inplace(d, rate, seed, tag)
}

/// Values below this are flushed to zero wherever exp() can underflow.
/// Subnormal floats cost 10-100x per operation on x86 and would otherwise
/// leak out of saturated softmaxes into every downstream kernel.
pub const SUBNORMAL_FLUSH: f64 = 1e-35;

pub fn flush_tiny<T: Scalar>(v: T) -> T {
    if v.to_f64().abs() < SUBNORMAL_FLUSH {
        T::ZERO
    } else {
        v
    }
}

/// Numerically stable row softmax; sub-threshold probabilities flush to zero.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut max = row[0];
        for &v in row.iter() {
            max = max.maximum(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = flush_tiny(*v / sum);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_applies_bias() {
        let mut layer = Linear::<f64>::zeros(2, 2);
        layer.w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        layer.b = vec![10.0, 20.0];
        let x = Matrix::from_vec(1, 2, vec![3.0, 4.0]);
        let y = layer.forward(&x);
        assert_eq!(y.data(), &[13.0, 24.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Matrix::from_vec(3, 4, (0..12).map(|x| (x as f32) * 1.7 - 5.0).collect());
        let p = softmax_rows(&logits);
        for i in 0..3 {
            let sum: f32 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dropout_mask_is_seed_deterministic_and_precision_agnostic() {
        let base: Vec<f64> = (0..40).map(|i| i as f64 + 1.0).collect();
        let mut a = Matrix::from_vec(5, 8, base.clone());
        let mut b = Matrix::from_vec(5, 8, base.clone());
        dropout_inplace(&mut a, 0.5, 7, 3);
        dropout_inplace(&mut b, 0.5, 7, 3);
        assert_eq!(a.data(), b.data());

        let mut c = Matrix::from_vec(5, 8, base.iter().map(|&v| v as f32).collect());
        dropout_inplace(&mut c, 0.5, 7, 3);
        for (x, y) in a.data().iter().zip(c.data()) {
            assert_eq!(*x == 0.0, *y == 0.0);
        }

        let mut d = Matrix::from_vec(5, 8, base);
        dropout_inplace(&mut d, 0.5, 8, 3);
        assert_ne!(a.data(), d.data());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let base: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let mut m = Matrix::from_vec(3, 4, base.clone());
        dropout_inplace(&mut m, 0.0, 1, 1);
        assert_eq!(m.data(), &base[..]);
    }

    #[test]
    fn glorot_respects_limit_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Linear::<f32>::glorot(10, 20, &mut rng);
        let limit = (6.0f64 / 30.0).sqrt() as f32;
        assert!(a.w.data().iter().all(|v| v.abs() <= limit));
        assert!(a.b.iter().all(|&v| v == 0.0));

        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let b = Linear::<f32>::glorot(10, 20, &mut rng2);
        assert_eq!(a.w.data(), b.w.data());
    }
}
