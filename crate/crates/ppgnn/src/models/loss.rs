//! Cross-entropy loss for node classification.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

use super::common::{flush_tiny, softmax_rows};

/// Mean negative log-likelihood over the batch, plus the logit gradient
/// `(softmax - onehot) / b`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[u32]) -> Result<(T, Matrix<T>)> {
    let b = logits.rows();
    let c = logits.cols();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Shape(format!("label {bad} out of range ({c} classes)")));
    }

    let mut probs = softmax_rows(logits);
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut loss = T::ZERO;
    let floor = T::from_f64(super::common::SUBNORMAL_FLUSH);
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row_mut(i);
        loss -= row[label as usize].maximum(floor).ln();
        for v in row.iter_mut() {
            *v = flush_tiny(*v * inv_b);
        }
        row[label as usize] -= inv_b;
    }
    Ok((loss * inv_b, probs))
}
