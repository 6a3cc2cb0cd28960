//! Dense row-major f32 kernels used by the forward pass.
//!
//! Every kernel computes each output row from the matching input row alone,
//! with a fixed accumulation order. Processing a sequence in one call or one
//! row at a time therefore produces bit-identical results, which is what lets
//! the KV-cached decode path match the uncached path exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const NORM_EPS: f32 = 1e-5;

/// Row-major matrix `[rows x cols]`, used as `y = x · W` with `W` shaped `[in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x [n x w.rows] · w -> [n x w.cols]`.
pub fn matmul(x: &[f32], n: usize, w: &Matrix) -> Vec<f32> {
    debug_assert_eq!(x.len(), n * w.rows);
    let mut out = vec![0.0f32; n * w.cols];
    for r in 0..n {
        let xr = &x[r * w.rows..(r + 1) * w.rows];
        let or = &mut out[r * w.cols..(r + 1) * w.cols];
        for (i, &a) in xr.iter().enumerate() {
            let wr = w.row(i);
            for (o, &b) in or.iter_mut().zip(wr) {
                *o += a * b;
            }
        }
    }
    out
}

/// RMS normalization of each `width`-wide row, scaled per feature by `gain`.
pub fn rms_norm(x: &[f32], width: usize, gain: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (xr, or) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let ms = xr.iter().map(|v| v * v).sum::<f32>() / width as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = v * inv * g;
        }
    }
    out
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// In-place log-softmax of one row; the normalizer is accumulated in f64.
pub fn log_softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
    let log_z = max as f64 + sum.ln();
    for v in row.iter_mut() {
        *v = (*v as f64 - log_z) as f32;
    }
}

pub fn add_in_place(acc: &mut [f32], other: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}
