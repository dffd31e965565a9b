//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::matrix::Scalar;

use super::ModelParams;

#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>, lr: f64) -> Self {
        let shapes: Vec<usize> = params.flat().iter().map(|s| s.len()).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
        }
    }
}

/// One Adam update over every parameter tensor.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.step += 1;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one_minus_b1 = T::from_f64(1.0 - state.beta1);
    let one_minus_b2 = T::from_f64(1.0 - state.beta2);
    let bc1 = T::from_f64(1.0 - state.beta1.powi(state.step as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(state.step as i32));
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(state.eps);

    let grads = grads.flat();
    let mut slices = params.flat_mut();
    if slices.len() != grads.len() || slices.len() != state.first_moment.len() {
        return Err(Error::Shape(
            "optimizer state does not match parameter layout".into(),
        ));
    }
    for ((p_slice, g_slice), (m_slice, v_slice)) in slices
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(&mut state.second_moment))
    {
        if p_slice.len() != g_slice.len() || p_slice.len() != m_slice.len() {
            return Err(Error::Shape(
                "gradient tensor shape does not match parameters".into(),
            ));
        }
        for (((p, &g), m), v) in p_slice
            .iter_mut()
            .zip(g_slice.iter())
            .zip(m_slice.iter_mut())
            .zip(v_slice.iter_mut())
        {
            *m = b1 * *m + one_minus_b1 * g;
            *v = b2 * *v + one_minus_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
