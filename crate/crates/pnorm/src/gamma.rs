//! The quadratically smoothed power family `gamma(t, x)` and the residual
//! objective built from it.
//!
//! For a threshold `t >= 0` the function is quadratic inside `|x| <= t` and
//! the plain p-th power (plus an offset keeping it C^1) outside:
//!
//! ```text
//! gamma_p(t, x) = (p/2) t^(p-2) x^2            if |x| <= t
//!               = |x|^p + (p/2 - 1) t^p        otherwise
//! ```
//!
//! On vectors it denotes the coordinate-wise sum. Key facts used as runtime
//! checks and tests throughout the crate: homogeneity
//! `gamma(s t, s x) = s^p gamma(t, x)`, the derivative
//! `gamma'(t, x) = p max(t, |x|)^(p-2) x`, and the local sandwich
//!
//! ```text
//! |x|^p + g d + (p-1)/(p 2^p) gamma(|x|, d) <= |x+d|^p <= |x|^p + g d + 2^p gamma(|x|, d)
//! ```
//!
//! with `g` the derivative of `|x|^p`.

use crate::error::{Result, SolverError};
use crate::lin::{abs_power_grad, pow_pos};
use nalgebra::DVector;

/// Exponent `p` and the derived constants used by every layer of the solver.
#[derive(Debug, Clone, Copy)]
pub struct GammaParams {
    /// Primal exponent, in `(1, inf)`.
    pub p: f64,
    /// Dual exponent `p / (p - 1)`.
    pub q: f64,
    /// Step scale `((p-1) / (p 4^p))^(1 / min(1, p-1))`.
    pub lambda: f64,
    /// Residual coefficient `(p-1) / (p 2^p)`.
    pub res_coeff: f64,
    /// Upper sandwich coefficient `2^p`.
    pub upper_coeff: f64,
}

impl GammaParams {
    pub fn new(p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 1.0) {
            return Err(SolverError::InvalidInput(format!(
                "exponent must be finite and > 1, got {p}"
            )));
        }
        let q = p / (p - 1.0);
        let lambda = ((p - 1.0) / (p * pow_pos(4.0, p))).powf(1.0 / 1.0_f64.min(p - 1.0));
        let res_coeff = (p - 1.0) / (p * pow_pos(2.0, p));
        let params = GammaParams {
            p,
            q,
            lambda,
            res_coeff,
            upper_coeff: pow_pos(2.0, p),
        };
        debug_assert!(params.lambda > 0.0 && params.lambda <= 1.0);
        debug_assert!(params.res_coeff > 0.0 && params.res_coeff < 1.0);
        Ok(params)
    }
}

/// Per-coordinate smoothing thresholds. Entries are nonnegative; after
/// clamping by the bin search they lie in `[m^(-1/p), 1]`.
#[derive(Debug, Clone)]
pub struct SmoothingVector(pub DVector<f64>);

impl SmoothingVector {
    pub fn new(t: DVector<f64>) -> Result<Self> {
        if t.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(SolverError::InvalidInput(
                "smoothing thresholds must be finite and nonnegative".into(),
            ));
        }
        Ok(SmoothingVector(t))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    /// True when every entry lies in `[m^(-1/p), 1]` (up to roundoff).
    pub fn is_clamped(&self, p: f64, m: usize) -> bool {
        let lo = pow_pos(m as f64, -1.0 / p) * (1.0 - 1e-12);
        self.0.iter().all(|&t| t >= lo && t <= 1.0 + 1e-12)
    }
}

/// The smoothed p-th power at a single coordinate.
pub fn gamma(p: f64, t: f64, x: f64) -> f64 {
    assert!(
        p.is_finite() && t.is_finite() && x.is_finite(),
        "gamma rejects non-finite inputs (p={p}, t={t}, x={x})"
    );
    assert!(p >= 1.0, "gamma needs p >= 1, got {p}");
    assert!(t >= 0.0, "gamma needs t >= 0, got {t}");
    let ax = x.abs();
    if ax == 0.0 {
        return 0.0;
    }
    if ax <= t {
        0.5 * p * pow_pos(t, p - 2.0) * x * x
    } else {
        // At t = 0 this branch is |x|^p, the limit value for every p >= 1.
        pow_pos(ax, p) + (0.5 * p - 1.0) * pow_pos(t, p)
    }
}

/// Derivative of [`gamma`] in `x`: `p max(t, |x|)^(p-2) x`.
///
/// Panics for the genuinely singular combination `t = 0, x = 0, p < 2`;
/// callers clamp `t >= m^(-1/p)` before differentiating.
pub fn gamma_prime(p: f64, t: f64, x: f64) -> f64 {
    assert!(
        p.is_finite() && t.is_finite() && x.is_finite(),
        "gamma_prime rejects non-finite inputs (p={p}, t={t}, x={x})"
    );
    assert!(t >= 0.0, "gamma_prime needs t >= 0, got {t}");
    assert!(
        t > 0.0 || x != 0.0 || p >= 2.0,
        "gamma_prime is singular at t = 0, x = 0 for p < 2"
    );
    if x == 0.0 && t == 0.0 {
        // Only reachable with p >= 2, where the derivative vanishes.
        return 0.0;
    }
    let base = t.max(x.abs());
    p * pow_pos(base, p - 2.0) * x
}

/// Coordinate-wise sum `sum_e gamma(t_e, x_e)`.
pub fn gamma_sum(p: f64, t: &DVector<f64>, x: &DVector<f64>) -> f64 {
    assert_eq!(t.len(), x.len(), "gamma_sum length mismatch");
    t.iter().zip(x.iter()).map(|(&te, &xe)| gamma(p, te, xe)).sum()
}

/// Coordinate-wise derivative vector.
pub fn gamma_prime_vec(p: f64, t: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    assert_eq!(t.len(), x.len(), "gamma_prime_vec length mismatch");
    DVector::from_iterator(
        t.len(),
        t.iter().zip(x.iter()).map(|(&te, &xe)| gamma_prime(p, te, xe)),
    )
}

/// Residual objective `<g, d> - res_coeff * sum_e gamma(|x|_e, d_e)`.
///
/// A positive value means the step `d` certifies room for improvement at the
/// iterate whose absolute values are `xabs`.
pub fn residual_value(
    params: &GammaParams,
    g: &DVector<f64>,
    xabs: &SmoothingVector,
    delta: &DVector<f64>,
) -> Result<f64> {
    if g.len() != xabs.len() || g.len() != delta.len() {
        return Err(SolverError::InvalidInput(format!(
            "residual_value length mismatch: g={}, |x|={}, delta={}",
            g.len(),
            xabs.len(),
            delta.len()
        )));
    }
    Ok(g.dot(delta) - params.res_coeff * gamma_sum(params.p, &xabs.0, delta))
}

/// The local sandwich around `|x + d|^p`: returns `(lower, upper)` with
/// `lower <= |x + d|^p <= upper` for every `x, d`.
pub fn local_approx_bounds(params: &GammaParams, x: f64, delta: f64) -> (f64, f64) {
    let p = params.p;
    let base = pow_pos(x.abs(), p);
    let g = abs_power_grad(p, x);
    let gm = gamma(p, x.abs(), delta);
    (
        base + g * delta + params.res_coeff * gm,
        base + g * delta + params.upper_coeff * gm,
    )
}

/// Checks the rescaling bracket
/// `min(s^2, s^p) gamma(t, x) <= gamma(t, s x) <= max(s^2, s^p) gamma(t, x)`
/// at relative slack `1e-9`. Used as a test utility and runtime assertion.
pub fn rescale_bound_check(p: f64, t: f64, x: f64, lambda_scale: f64) -> bool {
    assert!(lambda_scale >= 0.0, "rescale_bound_check needs lambda >= 0");
    let g = gamma(p, t, x);
    let gs = gamma(p, t, lambda_scale * x);
    let s2 = lambda_scale * lambda_scale;
    let sp = pow_pos(lambda_scale, p);
    let lo = s2.min(sp) * g;
    let hi = s2.max(sp) * g;
    let slack = 1e-9 * hi.abs().max(1.0e-300);
    lo - slack <= gs && gs <= hi + slack
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(p: f64) -> GammaParams {
        GammaParams::new(p).unwrap()
    }

    #[test]
    fn gamma_point_values() {
        // gamma(0, x) = |x|^p.
        assert_relative_eq!(gamma(3.0, 0.0, 2.0), 8.0);
        // p = 2 collapses to x^2 on both branches.
        assert_relative_eq!(gamma(2.0, 5.0, 3.0), 9.0);
        // Quadratic branch: (p/2) t^(p-2) x^2 = 2 * 1 * 0.25.
        assert_relative_eq!(gamma(4.0, 1.0, 0.5), 0.5);
        // Power branch: |x|^p + (p/2 - 1) t^p = 16 + 1.
        assert_relative_eq!(gamma(4.0, 1.0, 2.0), 17.0);
    }

    #[test]
    fn gamma_prime_point_values() {
        assert_relative_eq!(gamma_prime(4.0, 1.0, 2.0), 32.0);
        assert_relative_eq!(gamma_prime(3.5, 0.7, 0.0), 0.0);
        assert_relative_eq!(gamma_prime(2.0, 7.0, 3.0), 6.0);
    }

    #[test]
    #[should_panic(expected = "singular")]
    fn gamma_prime_singular_point() {
        gamma_prime(1.5, 0.0, 0.0);
    }

    #[test]
    fn residual_value_hand_cases() {
        let gp = params(2.0);
        assert_relative_eq!(gp.res_coeff, 0.125);
        let g = DVector::from_row_slice(&[2.0]);
        let xabs = SmoothingVector::new(DVector::from_row_slice(&[1.0])).unwrap();
        let d = DVector::from_row_slice(&[1.0]);
        assert_relative_eq!(residual_value(&gp, &g, &xabs, &d).unwrap(), 1.875);
        let d = DVector::from_row_slice(&[-1.0]);
        assert_relative_eq!(residual_value(&gp, &g, &xabs, &d).unwrap(), -2.125);
        let d = DVector::from_row_slice(&[0.0]);
        assert_relative_eq!(residual_value(&gp, &g, &xabs, &d).unwrap(), 0.0);
    }

    #[test]
    fn residual_value_length_mismatch() {
        let gp = params(2.0);
        let g = DVector::from_row_slice(&[2.0, 1.0]);
        let xabs = SmoothingVector::new(DVector::from_row_slice(&[1.0])).unwrap();
        let d = DVector::from_row_slice(&[1.0]);
        assert!(residual_value(&gp, &g, &xabs, &d).is_err());
    }

    #[test]
    fn local_approx_hand_cases() {
        // d = 0 collapses both bounds onto |x|^p.
        let gp = params(3.0);
        let (lo, hi) = local_approx_bounds(&gp, 1.0, 0.0);
        assert_relative_eq!(lo, 1.0);
        assert_relative_eq!(hi, 1.0);
        // p = 2, x = 1, d = 1, g = p|x|^(p-2)x = 2:
        // lower = 1 + 2 + gamma/8 = 3.125, upper = 1 + 2 + 4 = 7, bracketing 4.
        let gp = params(2.0);
        let (lo, hi) = local_approx_bounds(&gp, 1.0, 1.0);
        assert_relative_eq!(lo, 3.125);
        assert_relative_eq!(hi, 7.0);
        assert!(lo <= 4.0 && 4.0 <= hi);
        // x = 0: gradient term vanishes, gamma(0, 2) = 8.
        let gp = params(3.0);
        let (lo, hi) = local_approx_bounds(&gp, 0.0, 2.0);
        assert_relative_eq!(lo, gp.res_coeff * 8.0);
        assert_relative_eq!(hi, 64.0);
        assert!(lo <= 8.0 && 8.0 <= hi);
    }

    #[test]
    fn rescale_hand_cases() {
        assert!(rescale_bound_check(3.0, 0.5, 2.0, 1.0));
        assert!(rescale_bound_check(3.0, 0.5, 2.0, 0.0));
        // p=4, t=1, x=2, s=0.5: 0.0625 * 17 <= gamma(1,1) = 2 <= 0.25 * 17.
        assert!(rescale_bound_check(4.0, 1.0, 2.0, 0.5));
        assert!(0.0625 * 17.0 <= gamma(4.0, 1.0, 1.0));
        assert!(gamma(4.0, 1.0, 1.0) <= 0.25 * 17.0);
    }

    #[test]
    fn lambda_formula() {
        // p >= 2: exponent is 1.
        let gp = params(4.0);
        assert_relative_eq!(gp.lambda, 3.0 / 1024.0);
        // p < 2: exponent is 1/(p-1).
        let gp = params(1.5);
        assert_relative_eq!(gp.lambda, (0.5_f64 / (1.5 * 8.0)).powf(2.0), epsilon = 1e-15);
        assert_relative_eq!(gp.q, 3.0);
        assert!(gp.lambda.powf(1.0_f64.min(gp.p - 1.0)) <= (gp.p - 1.0) / (gp.p * 4f64.powf(gp.p)) + 1e-15);
    }

    proptest! {
        #[test]
        fn homogeneity(p in 1.0f64..16.0, t in 0.0f64..10.0, x in -10.0f64..10.0, s in 0.0f64..10.0) {
            let lhs = gamma(p, s * t, s * x);
            let rhs = pow_pos(s, p) * gamma(p, t, x);
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn dominance_for_large_p(p in 2.0f64..16.0, t in 0.0f64..10.0, x in -10.0f64..10.0) {
            let g = gamma(p, t, x);
            prop_assert!(g >= pow_pos(x.abs(), p) * (1.0 - 1e-12));
            prop_assert!(g >= 0.5 * p * pow_pos(t, p - 2.0) * x * x * (1.0 - 1e-12));
        }

        #[test]
        fn derivative_matches_finite_differences(p in 1.1f64..16.0, t in 0.01f64..10.0, x in -10.0f64..10.0) {
            let h = 1e-6 * x.abs().max(1.0);
            let fd = (gamma(p, t, x + h) - gamma(p, t, x - h)) / (2.0 * h);
            let an = gamma_prime(p, t, x);
            let scale = an.abs().max(fd.abs()).max(1e-6);
            prop_assert!((fd - an).abs() <= 1e-5 * scale, "p={p} t={t} x={x} fd={fd} an={an}");
        }

        #[test]
        fn sandwich_brackets_power(p in 1.1f64..16.0, x in -5.0f64..5.0, d in -5.0f64..5.0) {
            let gp = GammaParams::new(p).unwrap();
            let (lo, hi) = local_approx_bounds(&gp, x, d);
            let target = pow_pos((x + d).abs(), p);
            let slack = 1e-10 * target.abs().max(1.0);
            prop_assert!(lo <= target + slack, "p={p} x={x} d={d} lo={lo} target={target}");
            prop_assert!(target <= hi + slack, "p={p} x={x} d={d} hi={hi} target={target}");
        }

        #[test]
        fn second_order_additive_bound(p in 2.0f64..12.0, t in 0.0f64..5.0, x in -5.0f64..5.0, d in -5.0f64..5.0) {
            let lhs = gamma(p, t, x + d);
            let grad_term = if t == 0.0 && x == 0.0 && p < 2.0 { 0.0 } else { (gamma_prime(p, t, x) * d).abs() };
            let m = t.max(x.abs()).max(d.abs());
            let rhs = gamma(p, t, x) + grad_term + p * p * pow_pos(2.0, p - 3.0) * pow_pos(m, p - 2.0) * d * d;
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12, "p={p} t={t} x={x} d={d}");
        }

        #[test]
        fn log_derivative_bracket(p in 1.1f64..16.0, t in 0.0f64..5.0, x in -5.0f64..5.0) {
            prop_assume!(x != 0.0);
            let g = gamma(p, t, x);
            prop_assume!(g > 1e-12);
            let ratio = x * gamma_prime(p, t, x) / g;
            prop_assert!(ratio >= 2.0_f64.min(p) - 1e-9);
            prop_assert!(ratio <= 2.0_f64.max(p) + 1e-9);
        }

        #[test]
        fn rescale_bracket(p in 1.1f64..16.0, t in 0.0f64..5.0, x in -5.0f64..5.0, s in 0.0f64..4.0) {
            prop_assert!(rescale_bound_check(p, t, x, s));
        }
    }
}
