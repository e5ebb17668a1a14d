//! Compact SVD, polar factor, nuclear norm, numerical rank and the
//! Newton–Schulz whitening iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// Compact SVD `a = u · diag(sigma) · vᵀ` with `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult<T> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, &s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_transpose_b(&self.v).expect("svd factors have matching inner dimension")
    }
}

/// Which singular values count toward the numerical rank.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "tolerance")]
pub enum RankPolicy {
    /// `σ > max(rows, cols) · ε_machine · σ_max`
    #[default]
    MachineEpsilon,
    /// `σ > τ · σ_max`
    Relative(f64),
}

impl RankPolicy {
    pub fn threshold<T: Scalar>(&self, shape: (usize, usize), sigma_max: T) -> T {
        match *self {
            RankPolicy::MachineEpsilon => {
                T::lit(shape.0.max(shape.1) as f64) * T::epsilon() * sigma_max
            }
            RankPolicy::Relative(tau) => T::lit(tau) * sigma_max,
        }
    }

    pub fn count<T: Scalar>(&self, shape: (usize, usize), sigma: &[T]) -> usize {
        let Some(&sigma_max) = sigma.first() else { return 0 };
        if sigma_max <= T::zero() {
            return 0;
        }
        let tau = self.threshold(shape, sigma_max);
        sigma.iter().take_while(|&&s| s > tau).count()
    }
}

/// Coefficients and iteration count for the quintic Newton–Schulz iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonSchulzConfig {
    pub iterations: usize,
    pub coeff_a: f64,
    pub coeff_b: f64,
    pub coeff_c: f64,
    pub normalization_epsilon: f64,
}

impl Default for NewtonSchulzConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            coeff_a: 3.4445,
            coeff_b: -4.7750,
            coeff_c: 2.0315,
            normalization_epsilon: 1e-7,
        }
    }
}

impl NewtonSchulzConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self { iterations, ..Self::default() }
    }

    /// Quintic iteration `(15x − 10x³ + 3x⁵)/8`, which converges to the exact
    /// polar factor. The default coefficients instead settle singular values
    /// into a band of roughly [0.68, 1.13] after a few steps.
    pub fn classical(iterations: usize) -> Self {
        Self {
            iterations,
            coeff_a: 15.0 / 8.0,
            coeff_b: -10.0 / 8.0,
            coeff_c: 3.0 / 8.0,
            normalization_epsilon: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfiguration("iterations must be at least 1".into()));
        }
        if !(self.normalization_epsilon > 0.0) {
            return Err(Error::InvalidConfiguration(
                "normalization_epsilon must be positive".into(),
            ));
        }
        for (name, c) in [("coeff_a", self.coeff_a), ("coeff_b", self.coeff_b), ("coeff_c", self.coeff_c)] {
            if !c.is_finite() {
                return Err(Error::InvalidConfiguration(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Operator that maps a momentum block to its update direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Whitening {
    ExactPolar,
    NewtonSchulz(NewtonSchulzConfig),
}

impl Default for Whitening {
    fn default() -> Self {
        Whitening::NewtonSchulz(NewtonSchulzConfig::default())
    }
}

impl Whitening {
    pub fn apply<T: Scalar>(&self, a: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Whitening::ExactPolar => exact_polar(a),
            Whitening::NewtonSchulz(cfg) => newton_schulz(a, cfg),
        }
    }
}

/// One-sided Jacobi SVD.
///
/// Works on the orientation with `rows >= cols` so that the rotations act on
/// the `min(rows, cols)` columns. Columns belonging to exactly zero singular
/// values are completed to an orthonormal set.
pub fn compact_svd<T: Scalar>(a: &Matrix<T>) -> Result<SvdResult<T>> {
    a.ensure_finite()?;
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = work.shape();

    let scale = work.max_abs();
    if scale.is_zero() {
        return Ok(zero_svd(a.rows(), a.cols()));
    }
    let inv = T::one() / scale;

    // Column-major copies: cols[j] is column j of the working matrix.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| (0..m).map(|i| work[(i, j)] * inv).collect()).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    let tol = T::epsilon() * T::lit(m as f64);
    let two = T::lit(2.0);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.is_zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "SVD of {}x{} matrix did not converge in {MAX_SWEEPS} sweeps",
            a.rows(),
            a.cols()
        )));
    }

    let norms: Vec<T> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s * scale);
        if s > T::zero() {
            for i in 0..m {
                u[(i, k)] = cols[j][i] / s;
            }
        } else {
            missing.push(k);
        }
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
    }
    complete_orthonormal(&mut u, &missing);

    let (u, v) = if transposed { (v, u) } else { (u, v) };
    Ok(SvdResult { u, sigma, v })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

fn zero_svd<T: Scalar>(rows: usize, cols: usize) -> SvdResult<T> {
    let k = rows.min(cols);
    let mut u = Matrix::zeros(rows, k);
    let mut v = Matrix::zeros(cols, k);
    for i in 0..k {
        u[(i, i)] = T::one();
        v[(i, i)] = T::one();
    }
    SvdResult { u, sigma: vec![T::zero(); k], v }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column (Gram–Schmidt over the standard basis, applied twice).
fn complete_orthonormal<T: Scalar>(u: &mut Matrix<T>, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, k) = u.shape();
    let mut filled: Vec<usize> = (0..k).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0;
    for &target in missing {
        while candidate < m {
            let mut e = vec![T::zero(); m];
            e[candidate] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for &c in &filled {
                    let proj: T = (0..m).map(|i| u[(i, c)] * e[i]).sum();
                    for (i, x) in e.iter_mut().enumerate() {
                        *x -= proj * u[(i, c)];
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > T::lit(0.5) {
                for (i, x) in e.iter().enumerate() {
                    u[(i, target)] = *x / norm;
                }
                filled.push(target);
                break;
            }
        }
    }
}

/// Polar factor `U_r V_rᵀ` over the singular values above the default rank
/// tolerance; the zero matrix maps to zero.
pub fn exact_polar<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let svd = compact_svd(a)?;
    let r = RankPolicy::MachineEpsilon.count(a.shape(), &svd.sigma);
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let mut acc = T::zero();
            for k in 0..r {
                acc += svd.u[(i, k)] * svd.v[(j, k)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

pub fn nuclear_norm<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    Ok(compact_svd(a)?.sigma.into_iter().sum())
}

pub fn numerical_rank<T: Scalar>(a: &Matrix<T>, policy: RankPolicy) -> Result<usize> {
    let svd = compact_svd(a)?;
    Ok(policy.count(a.shape(), &svd.sigma))
}

pub fn frobenius_inner<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "frobenius_inner: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

/// Approximate polar factor via `X ← aX + (bA + cA²)X`, `A = XXᵀ`, starting
/// from `a / (‖a‖_F + ε)`. Tall inputs are iterated on their transpose.
pub fn newton_schulz<T: Scalar>(a: &Matrix<T>, config: &NewtonSchulzConfig) -> Result<Matrix<T>> {
    config.validate()?;
    a.ensure_finite()?;
    if a.is_zero() {
        return Ok(Matrix::zeros(a.rows(), a.cols()));
    }
    let transposed = a.rows() > a.cols();
    let mut x = if transposed { a.transpose() } else { a.clone() };
    let norm = x.frobenius_norm() + T::lit(config.normalization_epsilon);
    x = x.scale(T::one() / norm);

    let (ca, cb, cc) = (T::lit(config.coeff_a), T::lit(config.coeff_b), T::lit(config.coeff_c));
    for iteration in 0..config.iterations {
        let gram = x.matmul_transpose_b(&x)?;
        let gram_sq = gram.matmul(&gram)?;
        let mut poly = gram.scale(cb);
        poly.axpy(cc, &gram_sq)?;
        let mut next = poly.matmul(&x)?;
        next.axpy(ca, &x)?;
        if !next.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "Newton-Schulz produced non-finite values at iteration {iteration}"
            )));
        }
        x = next;
    }
    Ok(if transposed { x.transpose() } else { x })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        // xorshift is enough for unit tests here
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Matrix::from_fn(rows, cols, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn diagonal_singular_values() {
        let a = Matrix::from_diag(&[3.0, 4.0]);
        let svd = compact_svd(&a).unwrap();
        assert_eq!(svd.sigma, vec![4.0, 3.0]);
        assert_eq!(nuclear_norm(&a).unwrap(), 7.0);
        assert_eq!(exact_polar(&a).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn zero_matrix_cases() {
        let z = Matrix::<f64>::zeros(3, 5);
        let svd = compact_svd(&z).unwrap();
        assert_eq!(svd.sigma, vec![0.0; 3]);
        assert_eq!(svd.u.shape(), (3, 3));
        assert_eq!(svd.v.shape(), (5, 3));
        assert!(exact_polar(&z).unwrap().is_zero());
        assert_eq!(nuclear_norm(&z).unwrap(), 0.0);
        assert_eq!(numerical_rank(&z, RankPolicy::MachineEpsilon).unwrap(), 0);
        assert!(newton_schulz(&z, &NewtonSchulzConfig::default()).unwrap().is_zero());
    }

    #[test]
    fn tiny_singular_value_dropped() {
        let a = Matrix::from_diag(&[5.0, 1e-16]);
        assert_eq!(numerical_rank(&a, RankPolicy::default()).unwrap(), 1);
        assert_eq!(numerical_rank(&a, RankPolicy::Relative(1e-20)).unwrap(), 2);
    }

    #[test]
    fn rank_one_nuclear_norm() {
        let u = [0.6f64, 0.8];
        let v = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let a = Matrix::from_fn(2, 3, |i, j| -2.5 * u[i] * v[j]);
        assert!((nuclear_norm(&a).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(numerical_rank(&a, RankPolicy::default()).unwrap(), 1);
    }

    #[test]
    fn rank_deficient_completion_is_orthonormal() {
        // 4x6, rank 2: u columns past the rank must still be orthonormal
        let b = seeded(4, 2, 3);
        let c = seeded(2, 6, 4);
        let a = b.matmul(&c).unwrap();
        let svd = compact_svd(&a).unwrap();
        let gram = svd.u.transpose_a_matmul(&svd.u).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - target).abs() < 1e-10, "{gram:?}");
            }
        }
        assert_eq!(numerical_rank(&a, RankPolicy::default()).unwrap(), 2);
    }

    #[test]
    fn newton_schulz_rejects_zero_iterations() {
        let a = Matrix::<f64>::identity(2);
        let err = newton_schulz(&a, &NewtonSchulzConfig::with_iterations(0)).unwrap_err();
        assert!(err.to_string().contains("iterations"));
    }

    #[test]
    fn newton_schulz_reports_blowup() {
        let cfg = NewtonSchulzConfig { coeff_a: 1e200, ..NewtonSchulzConfig::default() };
        let err = newton_schulz(&seeded(3, 4, 1), &cfg).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure(ref m) if m.contains("iteration")), "{err}");
    }

    #[test]
    fn tall_and_wide_agree_under_transpose() {
        let a = seeded(5, 9, 7);
        let cfg = NewtonSchulzConfig::default();
        let wide = newton_schulz(&a, &cfg).unwrap();
        let tall = newton_schulz(&a.transpose(), &cfg).unwrap();
        assert_eq!(wide.transpose(), tall);
        let p = exact_polar(&a).unwrap();
        let pt = exact_polar(&a.transpose()).unwrap();
        assert!(p.transpose().sub(&pt).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn works_in_f32() {
        let a = Matrix::<f32>::from_diag(&[3.0, 4.0]);
        assert!((nuclear_norm(&a).unwrap() - 7.0).abs() < 1e-5);
        let o = newton_schulz(&a, &NewtonSchulzConfig::default()).unwrap();
        assert!(o[(0, 0)] > 0.6 && o[(1, 1)] > 0.6);
    }
}
