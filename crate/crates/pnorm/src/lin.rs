//! Dense linear-algebra helpers used across the solver.
//!
//! Everything at desk scale is dense `nalgebra`. The PSD solver is an LDL^T
//! factorization with a diagonal pivot threshold of `1e-12 * max(diag)`;
//! pivots below the threshold are treated as exact zeros, which gives
//! pseudo-inverse semantics on consistent right-hand sides.

use crate::error::{Result, SolverError};
use nalgebra::{DMatrix, DVector};

/// Relative diagonal pivot threshold for PSD factorizations.
pub const PSD_PIVOT_REL: f64 = 1e-12;

/// `u^c` for `u >= 0`, computed with explicit guards for `u = 0` and with
/// subnormal results flushed to zero so fractional exponents never produce
/// NaN chains downstream.
#[inline]
pub fn pow_pos(u: f64, c: f64) -> f64 {
    debug_assert!(u >= 0.0, "pow_pos needs a nonnegative base, got {u}");
    if u == 0.0 {
        return if c == 0.0 {
            1.0
        } else if c > 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
    }
    let r = u.powf(c);
    if r != 0.0 && r.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        r
    }
}

/// Derivative of `|x|^p` at `x`, with the `x = 0` limit pinned to zero
/// (valid for every `p > 1`).
#[inline]
pub fn abs_power_grad(p: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        p * pow_pos(x.abs(), p - 1.0) * x.signum()
    }
}

/// `sum_e |v_e|^p`.
pub fn pnorm_pow(v: &DVector<f64>, p: f64) -> f64 {
    v.iter().map(|&x| pow_pos(x.abs(), p)).sum()
}

/// LDL^T factorization of a symmetric PSD matrix with diagonal pivot
/// thresholding. Columns whose pivot falls below `PSD_PIVOT_REL * max(diag)`
/// are zeroed out, so solves return a particular solution on consistent
/// right-hand sides.
pub struct PsdFactor {
    l: DMatrix<f64>,
    d: DVector<f64>,
    active: Vec<bool>,
    rank: usize,
}

impl PsdFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(SolverError::InvalidInput(format!(
                "PSD factorization needs a square matrix, got {}x{}",
                n,
                m.ncols()
            )));
        }
        let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max);
        let thresh = PSD_PIVOT_REL * max_diag.max(f64::MIN_POSITIVE);
        let mut a = m.clone();
        let mut l = DMatrix::<f64>::identity(n, n);
        let mut d = DVector::<f64>::zeros(n);
        let mut active = vec![false; n];
        let mut rank = 0usize;
        for k in 0..n {
            let piv = a[(k, k)];
            if !piv.is_finite() {
                return Err(SolverError::Singular(format!(
                    "non-finite pivot at column {k}"
                )));
            }
            if piv <= thresh {
                // Treated as a null direction of the PSD matrix.
                continue;
            }
            active[k] = true;
            rank += 1;
            d[k] = piv;
            for i in (k + 1)..n {
                l[(i, k)] = a[(i, k)] / piv;
            }
            for j in (k + 1)..n {
                let ljk = l[(j, k)];
                if ljk == 0.0 {
                    continue;
                }
                for i in j..n {
                    a[(i, j)] -= l[(i, k)] * piv * ljk;
                }
            }
        }
        Ok(PsdFactor { l, d, active, rank })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// Solve `M x = rhs`, returning a particular solution (zero on the
    /// thresholded null directions).
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        debug_assert_eq!(rhs.len(), n);
        let mut y = rhs.clone();
        // Forward: L y = rhs.
        for k in 0..n {
            if !self.active[k] {
                y[k] = 0.0;
                continue;
            }
            let yk = y[k];
            for i in (k + 1)..n {
                y[i] -= self.l[(i, k)] * yk;
            }
        }
        // Diagonal.
        for k in 0..n {
            if self.active[k] {
                y[k] /= self.d[k];
            } else {
                y[k] = 0.0;
            }
        }
        // Backward: L^T x = y.
        for k in (0..n).rev() {
            if !self.active[k] {
                y[k] = 0.0;
                continue;
            }
            let mut s = y[k];
            for i in (k + 1)..n {
                s -= self.l[(i, k)] * y[i];
            }
            y[k] = s;
        }
        y
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(rhs.nrows(), rhs.ncols());
        for j in 0..rhs.ncols() {
            let col = DVector::from_column_slice(rhs.column(j).as_slice());
            out.set_column(j, &self.solve(&col));
        }
        out
    }
}

/// Singular values below `tol_rel * sigma_max` count as zero.
const SVD_RANK_REL: f64 = 1e-12;

fn thin_svd(a: &DMatrix<f64>) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    a.clone().svd(true, true)
}

/// Orthonormal basis of the null space of `a` (columns of the result).
///
/// Wide matrices are padded with zero rows before the SVD so `v_t` always
/// carries a complete orthonormal set of right singular vectors.
pub fn null_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let ncols = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(ncols, ncols);
    }
    let work = if a.nrows() < ncols {
        let mut p = DMatrix::<f64>::zeros(ncols, ncols);
        p.rows_mut(0, a.nrows()).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = work.svd(false, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = SVD_RANK_REL * smax.max(f64::MIN_POSITIVE);
    let v_t = svd.v_t.expect("svd requested v_t");
    let null_rows: Vec<usize> = (0..v_t.nrows())
        .filter(|&i| i >= svd.singular_values.len() || svd.singular_values[i] <= tol)
        .collect();
    let mut out = DMatrix::<f64>::zeros(ncols, null_rows.len());
    for (j, &i) in null_rows.iter().enumerate() {
        out.set_column(j, &v_t.row(i).transpose());
    }
    out
}

/// Orthonormal basis of the column space of `a`.
pub fn column_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 || a.nrows() == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let svd = thin_svd(a);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = SVD_RANK_REL * smax.max(f64::MIN_POSITIVE);
    let u = svd.u.expect("svd requested u");
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    u.columns(0, rank).into_owned()
}

/// Orthonormal basis of the orthogonal complement of the column space of `a`
/// in the full ambient space (columns of the result).
pub fn column_complement_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    null_space_basis(&a.transpose())
}

/// Largest singular value.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let svd = a.clone().svd(false, false);
    svd.singular_values.iter().cloned().fold(0.0_f64, f64::max)
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = thin_svd(a);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = SVD_RANK_REL * smax.max(f64::MIN_POSITIVE);
    svd.solve(b, tol)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Cached machinery for repeated projections onto `{x : A x = b}` and
/// row-space projections of gradients. Uses the normal matrix `A A^T`.
pub struct RowspaceProjector {
    a: DMatrix<f64>,
    factor: PsdFactor,
}

impl RowspaceProjector {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let aat = a * a.transpose();
        Ok(RowspaceProjector {
            a: a.clone(),
            factor: PsdFactor::new(&aat)?,
        })
    }

    /// Multiplier `y` minimizing `||A^T y - g||_2`.
    pub fn rowspace_coeffs(&self, g: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(&(&self.a * g))
    }

    /// `x + A^T (A A^T)^+ (b - A x)`: least-squares correction onto the
    /// constraint set.
    pub fn project(&self, x: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let r = b - &self.a * x;
        x + self.a.transpose() * self.factor.solve(&r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psd_solve_full_rank() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = PsdFactor::new(&m).unwrap();
        assert_eq!(f.rank(), 2);
        let rhs = DVector::from_row_slice(&[1.0, 2.0]);
        let x = f.solve(&rhs);
        assert_relative_eq!((&m * &x - &rhs).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psd_solve_rank_deficient_consistent() {
        // m = v v^T with v = (1, 2); rhs = 3 v is consistent.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let f = PsdFactor::new(&m).unwrap();
        assert_eq!(f.rank(), 1);
        let rhs = DVector::from_row_slice(&[3.0, 6.0]);
        let x = f.solve(&rhs);
        assert_relative_eq!((&m * &x - &rhs).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn null_space_of_wide_matrix() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let n = null_space_basis(&a);
        assert_eq!(n.ncols(), 2);
        assert_relative_eq!((&a * &n).norm(), 0.0, epsilon = 1e-12);
        let gram = n.transpose() * &n;
        assert_relative_eq!((gram - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn complement_plus_column_space_spans() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let u = column_space_basis(&a);
        let n = column_complement_basis(&a);
        assert_eq!(u.ncols() + n.ncols(), 4);
        assert_relative_eq!((u.transpose() * &n).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn projector_row_space() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let pr = RowspaceProjector::new(&a).unwrap();
        let b = DVector::from_row_slice(&[2.0]);
        let x0 = pr.project(&DVector::zeros(2), &b);
        assert_relative_eq!(x0[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x0[1], 1.0, epsilon = 1e-12);
    }
}
