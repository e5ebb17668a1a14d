#![allow(dead_code)]

use groupmuon_core::Matrix64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix64::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

pub fn to_na(m: &Matrix64) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &nalgebra::DMatrix<f64>) -> Matrix64 {
    Matrix64::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular values from nalgebra, sorted nonincreasing.
pub fn oracle_singular_values(m: &Matrix64) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Matrix with orthonormal rows (rows <= cols) from a QR factorization.
pub fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Matrix64 {
    let g = to_na(&gaussian(cols, rows, seed));
    let q = g.qr().q(); // cols x rows, orthonormal columns
    from_na(&q.transpose())
}

/// `U diag(s) Vᵀ` with prescribed singular values.
pub fn with_spectrum(rows: usize, cols: usize, spectrum: &[f64], seed: u64) -> Matrix64 {
    let k = spectrum.len();
    let u = orthonormal_rows(k, rows, seed).transpose(); // rows x k
    let v = orthonormal_rows(k, cols, seed + 1); // k x cols
    let us = Matrix64::from_fn(rows, k, |i, j| u[(i, j)] * spectrum[j]);
    us.matmul(&v).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
