//! Exactly β-smooth quadratics, where the one-step bounds hold with equality.

use groupmuon_core::{
    descent_bounds, muon_step_full, muon_step_partitioned, CriterionParams, Matrix64, MuonState64,
    RowPartition, Whitening,
};

use crate::error::{HarnessError, Result};

/// `L(W) = β/2 ‖W − target‖_F²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticProblem {
    pub target: Matrix64,
    pub beta: f64,
}

impl QuadraticProblem {
    pub fn new(target: Matrix64, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(HarnessError::Config(format!("curvature must be positive, got {beta}")));
        }
        Ok(Self { target, beta })
    }

    pub fn loss(&self, w: &Matrix64) -> Result<f64> {
        Ok(0.5 * self.beta * w.sub(&self.target)?.frobenius_norm_sq())
    }

    pub fn gradient(&self, w: &Matrix64) -> Result<Matrix64> {
        Ok(w.sub(&self.target)?.scale(self.beta))
    }
}

/// One exact-polar Muon step from `w0` with step size `eta`. Returns the
/// realized decrease and the matching bound (full bound for a single group,
/// grouped bound otherwise).
pub fn verify_one_step(
    problem: &QuadraticProblem,
    w0: &Matrix64,
    eta: f64,
    partition: &RowPartition,
) -> Result<(f64, f64)> {
    let g = problem.gradient(w0)?;
    let mut state = MuonState64::new(w0.shape(), 0.0, eta, Whitening::ExactPolar)?;
    let w1 = if partition.num_groups() == 1 {
        muon_step_full(w0, &g, &mut state)?
    } else {
        muon_step_partitioned(w0, &g, &mut state, partition)?
    };
    let realized = problem.loss(w0)? - problem.loss(&w1)?;
    let report = descent_bounds(&g, partition, &CriterionParams::new(problem.beta, eta)?)?;
    let bound = if partition.num_groups() == 1 { report.d_all } else { report.d_grp };
    Ok((realized, bound))
}

/// Tolerance used when comparing a realized decrease to its bound.
pub fn bound_holds(realized: f64, bound: f64) -> bool {
    realized >= bound - 1e-8 * (1.0 + bound.abs())
}
