//! Row-major dense matrices with instrumented allocation tracking.
//!
//! Every [`Matrix`] registers its buffer size with a global counter on
//! construction and deregisters on drop. The placement planner probes peak
//! working-set size through these counters (see [`mem`]), so all dense batch,
//! parameter, and activation data in this crate must live in `Matrix` buffers.
//!
//! Multiplication kernels are deterministic: each output row is accumulated
//! in a fixed order, and parallelism only ever splits work across disjoint
//! output rows.

use rayon::prelude::*;

/// Live/peak byte counters for `Matrix` allocations.
pub mod mem {
    use std::sync::atomic::{AtomicU64, Ordering};

    static LIVE: AtomicU64 = AtomicU64::new(0);
    static PEAK: AtomicU64 = AtomicU64::new(0);

    pub(super) fn track_alloc(bytes: u64) {
        let live = LIVE.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK.fetch_max(live, Ordering::Relaxed);
    }

    pub(super) fn track_free(bytes: u64) {
        LIVE.fetch_sub(bytes, Ordering::Relaxed);
    }

    /// Bytes currently held by live matrices.
    pub fn live_bytes() -> u64 {
        LIVE.load(Ordering::Relaxed)
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak_bytes() -> u64 {
        PEAK.load(Ordering::Relaxed)
    }

    /// Restart peak tracking from the current live volume.
    pub fn reset_peak() {
        PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

/// Element type for dense math: `f32` in production, `f64` for the
/// finite-difference shadow path in tests.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn maximum(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
}

/// Dense row-major matrix.
#[derive(Debug, PartialEq)]
pub struct Matrix<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Row count below which multiplication kernels stay single-threaded.
const PAR_ROW_THRESHOLD: usize = 64;

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![T::ZERO; rows * cols])
    }

    /// Wrap an existing buffer; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match dimensions");
        mem::track_alloc((data.len() * std::mem::size_of::<T>()) as u64);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    /// Copy rows `range` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix<T> {
        assert!(start <= end && end <= self.rows);
        Matrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Bytes held by this matrix's buffer.
    pub fn byte_size(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<T>()) as u64
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Greatest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> Clone for Matrix<T> {
    fn clone(&self) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.clone())
    }
}

impl<T: Scalar> Drop for Matrix<T> {
    fn drop(&mut self) {
        mem::track_free((self.data.len() * std::mem::size_of::<T>()) as u64);
    }
}

/// `C = A * B`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(m, n);

    let body = |(i, c_row): (usize, &mut [T])| {
        let a_row = a.row(i);
        for (l, &a_il) in a_row.iter().enumerate().take(k) {
            let b_row = &b.data[l * n..(l + 1) * n];
            for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_il * b_lj;
            }
        }
    };

    if m >= PAR_ROW_THRESHOLD {
        c.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.data.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// Materialized transpose.
pub fn transpose<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        let row = a.row(i);
        for (j, &v) in row.iter().enumerate() {
            out.data[j * a.rows + i] = v;
        }
    }
    out
}

/// `C = A^T * B` (gradient of weights). Transposes A first so the
/// multiplication runs on the contiguous row-major kernel.
pub fn matmul_at_b<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows, b.rows, "matmul_at_b outer dimensions differ");
    matmul(&transpose(a), b)
}

/// `C = A * B^T` (gradient of inputs; rows of both operands are contiguous).
pub fn matmul_a_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.cols, "matmul_a_bt inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut c = Matrix::zeros(m, n);

    let body = |(i, c_row): (usize, &mut [T])| {
        let a_row = a.row(i);
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij = acc;
        }
    };

    if m >= PAR_ROW_THRESHOLD {
        c.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.data.chunks_mut(n).enumerate().for_each(body);
    }
    c
}
