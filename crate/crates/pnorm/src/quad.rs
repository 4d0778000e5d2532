//! Weighted least-squares subproblems: `min d^T R d` subject to `A_hat d = rhs`
//! (the inner problem of the multiplicative-weights oracle), the electrical
//! energy of such a solve, the lower bound on energy growth under resistance
//! increases, and the Sherman-Morrison specialization that answers the same
//! problem from a solver for the unbordered normal matrix.
//!
//! Solves go through the KKT system: with `R = diag(r)`,
//! `d = R^-1 A_hat^T y` where `(A_hat R^-1 A_hat^T) y = rhs`. This module
//! always factors fresh; inverse reuse lives in [`crate::invmaint`].

use crate::error::{Result, SolverError};
use crate::lin::PsdFactor;
use nalgebra::{DMatrix, DVector};

/// Post-solve feasibility tolerance: `||A_hat d - rhs|| <= 1e-9 max(1, ||rhs||)`.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Strictly positive per-entry weights of the quadratic form.
#[derive(Debug, Clone)]
pub struct Resistances(pub DVector<f64>);

impl Resistances {
    pub fn new(r: DVector<f64>) -> Result<Self> {
        if r.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(SolverError::InvalidInput(
                "resistances must be finite and strictly positive".into(),
            ));
        }
        Ok(Resistances(r))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }
}

/// Affine constraints `a_hat d = rhs` of a weighted least-squares solve.
#[derive(Debug, Clone)]
pub struct ConstraintStack {
    pub a_hat: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl ConstraintStack {
    pub fn new(a_hat: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if a_hat.nrows() != d.len() {
            return Err(SolverError::InvalidInput(format!(
                "constraint stack has {} rows but demand has {} entries",
                a_hat.nrows(),
                d.len()
            )));
        }
        Ok(ConstraintStack { a_hat, d })
    }
}

/// Minimizer, optimum value, and KKT multiplier of a weighted ell_2 solve.
#[derive(Debug, Clone)]
pub struct L2Solution {
    pub delta: DVector<f64>,
    pub energy: f64,
    pub multiplier: DVector<f64>,
}

/// Solves `min d^T R d` s.t. `a_hat d = rhs` via pseudo-inverse semantics on
/// the normal matrix. Errors when the demand is inconsistent with the
/// constraint rows (rank-deficient stack with `rhs` outside the range).
pub fn solve_weighted_l2(stack: &ConstraintStack, r: &Resistances) -> Result<L2Solution> {
    let (k, m) = (stack.a_hat.nrows(), stack.a_hat.ncols());
    if r.len() != m {
        return Err(SolverError::InvalidInput(format!(
            "resistances have {} entries, constraints have {} columns",
            r.len(),
            m
        )));
    }
    // scaled = a_hat * R^-1 (columns scaled); normal matrix M = scaled * a_hat^T.
    let mut scaled = stack.a_hat.clone();
    for j in 0..m {
        let w = 1.0 / r.0[j];
        for i in 0..k {
            scaled[(i, j)] *= w;
        }
    }
    let normal = &scaled * stack.a_hat.transpose();
    let factor = PsdFactor::new(&normal)?;
    let y = factor.solve(&stack.d);
    let delta = scaled.transpose() * &y;
    let resid = (&stack.a_hat * &delta - &stack.d).norm();
    if resid > FEASIBILITY_TOL * stack.d.norm().max(1.0) {
        return Err(SolverError::Infeasible(format!(
            "constraint residual {resid:.3e} after weighted l2 solve (rank {} of {})",
            factor.rank(),
            k
        )));
    }
    let energy = stack.d.dot(&y);
    Ok(L2Solution {
        delta,
        energy: energy.max(0.0),
        multiplier: y,
    })
}

/// Electrical energy `Psi(r) = min { sum_e r_e d_e^2 : a_hat d = rhs }`.
pub fn energy(stack: &ConstraintStack, r: &Resistances) -> Result<f64> {
    Ok(solve_weighted_l2(stack, r)?.energy)
}

/// Lower bound on the energy after increasing resistances from `r` to
/// `r_new`, given the minimizer `delta` and optimum `psi` at `r`:
///
/// ```text
/// Psi(r_new) >= exp( sum_e min(1, (r'_e - r_e)/r_e) r_e d_e^2 / (2 Psi) ) * Psi
/// ```
pub fn energy_growth_lower_bound(
    delta: &DVector<f64>,
    r: &Resistances,
    r_new: &Resistances,
    psi: f64,
) -> f64 {
    assert_eq!(delta.len(), r.len());
    assert_eq!(delta.len(), r_new.len());
    if psi <= 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for e in 0..delta.len() {
        let rel = (r_new.0[e] - r.0[e]) / r.0[e];
        debug_assert!(rel >= -1e-12, "energy_growth_lower_bound needs r_new >= r");
        s += rel.min(1.0).max(0.0) * r.0[e] * delta[e] * delta[e];
    }
    (s / (2.0 * psi)).exp() * psi
}

/// Minimizes `0.5 f^T R f` s.t. `b_mat^T f = 0`, `g^T f = z` using one solve
/// against the normal matrix `b_mat^T R^-1 b_mat` plus Sherman-Morrison
/// bookkeeping. Requires the strict gap
/// `g^T R^-1 B (B^T R^-1 B)^-1 B^T R^-1 g < g^T R^-1 g`; near-degenerate
/// inputs fall back to the stacked KKT solve.
pub fn enhanced_solve(
    b_mat: &DMatrix<f64>,
    r: &Resistances,
    g: &DVector<f64>,
    z: f64,
) -> Result<DVector<f64>> {
    let (m, n) = (b_mat.nrows(), b_mat.ncols());
    if r.len() != m || g.len() != m {
        return Err(SolverError::InvalidInput(
            "enhanced_solve dimension mismatch".into(),
        ));
    }
    let rinv_g = DVector::from_iterator(m, g.iter().zip(r.0.iter()).map(|(&ge, &re)| ge / re));
    let gt_rinv_g = g.dot(&rinv_g);
    if gt_rinv_g <= 0.0 {
        // g = 0: only z = 0 is feasible and f = 0 answers it.
        if z == 0.0 {
            return Ok(DVector::zeros(m));
        }
        return Err(SolverError::Infeasible(
            "zero gradient row with nonzero demand".into(),
        ));
    }
    let g_tilde = b_mat.transpose() * &rinv_g;
    let mut scaled = b_mat.clone();
    for i in 0..m {
        let w = 1.0 / r.0[i];
        for j in 0..n {
            scaled[(i, j)] *= w;
        }
    }
    let normal = b_mat.transpose() * &scaled;
    let solved = PsdFactor::new(&normal).and_then(|f| {
        let minv_gt = f.solve(&g_tilde);
        let denom = gt_rinv_g - g_tilde.dot(&minv_gt);
        // The strict inequality precondition, checked numerically.
        if denom <= 1e-12 * gt_rinv_g {
            Err(SolverError::Singular(format!(
                "degenerate gradient: quadratic gap {denom:.3e} vs {gt_rinv_g:.3e}"
            )))
        } else {
            let v = &minv_gt * (-z / denom);
            let a = (z - g_tilde.dot(&v)) / gt_rinv_g;
            let mut f_out = b_mat * v + g * a;
            for i in 0..m {
                f_out[i] /= r.0[i];
            }
            Ok(f_out)
        }
    });
    match solved {
        Ok(f_out) => Ok(f_out),
        Err(_) => {
            // Stacked KKT fallback on [B^T; g^T] with demand (0, ..., 0, z).
            let mut a_hat = DMatrix::<f64>::zeros(n + 1, m);
            a_hat.rows_mut(0, n).copy_from(&b_mat.transpose());
            a_hat.row_mut(n).copy_from(&g.transpose());
            let mut d = DVector::<f64>::zeros(n + 1);
            d[n] = z;
            let stack = ConstraintStack::new(a_hat, d)?;
            Ok(solve_weighted_l2(&stack, r)?.delta)
        }
    }
}
