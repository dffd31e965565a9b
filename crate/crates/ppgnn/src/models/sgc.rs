//! SGC: a linear classifier on the deepest hop's features.
//!
//! The hop-selection weights collapse to "take hop R", so the whole model is
//! `logits = hops[R] * W + b`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

use super::common::Linear;

#[derive(Debug, Clone)]
pub struct SgcParams<T: Scalar> {
    pub linear: Linear<T>,
    pub num_hops: usize,
}

#[derive(Debug, Clone)]
pub struct SgcTape;

impl<T: Scalar> SgcParams<T> {
    pub fn init(
        feature_dim: usize,
        num_classes: usize,
        num_hops: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SgcParams {
            linear: Linear::glorot(feature_dim, num_classes, rng),
            num_hops,
        }
    }

    pub fn zeros_like(&self) -> Self {
        SgcParams {
            linear: Linear::zeros(self.linear.in_dim(), self.linear.out_dim()),
            num_hops: self.num_hops,
        }
    }

    pub fn forward(&self, hops: &[Matrix<T>]) -> Result<(Matrix<T>, SgcTape)> {
        if hops.len() != self.num_hops + 1 {
            return Err(Error::Shape(format!(
                "expected {} hop matrices, got {}",
                self.num_hops + 1,
                hops.len()
            )));
        }
        let x = hops.last().expect("at least one hop");
        if x.cols() != self.linear.in_dim() {
            return Err(Error::Shape(format!(
                "feature dim {} does not match weights ({})",
                x.cols(),
                self.linear.in_dim()
            )));
        }
        Ok((self.linear.forward(x), SgcTape))
    }

    pub fn backward(&self, hops: &[Matrix<T>], dlogits: &Matrix<T>) -> SgcParams<T> {
        let x = hops.last().expect("at least one hop");
        let (dw, db, _) = self.linear.backward(x, dlogits);
        SgcParams {
            linear: Linear { w: dw, b: db },
            num_hops: self.num_hops,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::common::softmax_rows;

    #[test]
    fn zero_params_give_uniform_softmax() {
        let params = SgcParams::<f32> {
            linear: Linear::zeros(3, 4),
            num_hops: 0,
        };
        let hops = vec![Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])];
        let (logits, _) = params.forward(&hops).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = softmax_rows(&logits);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn uses_only_the_last_hop() {
        let mut rng = rand::SeedableRng::seed_from_u64(3);
        let params = SgcParams::<f64>::init(2, 3, 2, &mut rng);
        let last = Matrix::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]);
        let hops = vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2), last.clone()];
        let (via_hops, _) = params.forward(&hops).unwrap();
        let direct = params.linear.forward(&last);
        assert_eq!(via_hops.data(), direct.data());
    }

    #[test]
    fn rejects_wrong_hop_count() {
        let params = SgcParams::<f32> {
            linear: Linear::zeros(3, 2),
            num_hops: 2,
        };
        let hops = vec![Matrix::zeros(2, 3)];
        assert!(params.forward(&hops).is_err());
    }
}
