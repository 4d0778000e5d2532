//! Lazy maintenance of the inverse of `A^T diag(r)^-1 A` across the
//! multiplicative-weights iterations.
//!
//! Resistances only grow, so per-entry increases are bucketed by magnitude:
//! bucket `eta` collects relative changes of roughly `2^-eta`, and an entry is
//! folded into the maintained snapshot once its bucket has fired `2^eta` times
//! and the global iteration index is divisible by `2^eta`. Entries that moved
//! get their snapshot refreshed through a Woodbury low-rank correction; the
//! rest keep their stale value, which stays within a `5 log2(m)` factor of the
//! live resistance. That sandwich makes the maintained inverse a usable
//! preconditioner, so the per-iteration solve is a preconditioned conjugate
//! gradient run instead of a fresh factorization.
//!
//! Here `A` is the matrix whose rows are indexed by entries (one row per
//! resistance), i.e. the transpose of the constraint stack used by the
//! weighted least-squares solver.

use crate::error::{Result, SolverError};
use crate::lin::PsdFactor;
use crate::quad::Resistances;
use nalgebra::{DMatrix, DVector};

/// Leading constant of the preconditioned-solve iteration budget
/// `c_pc * sqrt(5 log2 m) * ln(1/tol)`.
pub const PC_BUDGET_CONST: f64 = 4.0;

/// Default relative-residual target of [`MaintainedInverse::preconditioned_solve`].
pub const PC_TOL: f64 = 1e-10;

/// Max-entry agreement required between the updated and the freshly computed
/// inverse (audited in strict mode).
pub const WOODBURY_TOL: f64 = 1e-8;

/// Sandwich factor: live resistances stay within `5 max(1, log2 m)` of the
/// snapshot.
pub fn sandwich_factor(m: usize) -> f64 {
    5.0 * (m as f64).log2().max(1.0)
}

/// One telemetry row per update call.
#[derive(Debug, Clone)]
pub struct TelemetryRow {
    pub iteration: usize,
    pub changed: usize,
    pub k_eta: Vec<usize>,
    pub pc_iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Telemetry {
    pub rows: Vec<TelemetryRow>,
    pub total_per_eta: Vec<usize>,
    pub full_reinversions: usize,
    pub woodbury_max_err: f64,
    pub violations: Vec<String>,
}

impl Telemetry {
    /// CSV with one row per update: `i,changed,pc_iterations,k0,k1,...`.
    pub fn to_csv(&self) -> String {
        let etas = self.total_per_eta.len();
        let mut s = String::from("i,changed,pc_iterations");
        for e in 0..etas {
            s.push_str(&format!(",k{e}"));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&format!(
                "{},{},{}",
                row.iteration, row.changed, row.pc_iterations
            ));
            for e in 0..etas {
                s.push_str(&format!(",{}", row.k_eta.get(e).copied().unwrap_or(0)));
            }
            s.push('\n');
        }
        s
    }
}

/// Least nonnegative `eta` with `2^-eta <= (r_cur - r_prev) / r_hat`, capped
/// at `eta_max`. `None` when the change is zero/negative or smaller than the
/// last bucket resolves (such residue is accumulated by the caller).
pub fn bucket_index(r_prev_e: f64, r_cur_e: f64, r_hat_e: f64, eta_max: usize) -> Option<usize> {
    let rel = (r_cur_e - r_prev_e) / r_hat_e;
    if rel <= 0.0 {
        return None;
    }
    if rel >= 1.0 {
        return Some(0);
    }
    let eta = (-rel.log2()).ceil() as usize;
    if eta > eta_max {
        None
    } else {
        Some(eta)
    }
}

fn normal_matrix(a_rows: &DMatrix<f64>, r: &DVector<f64>) -> DMatrix<f64> {
    let (m, k) = (a_rows.nrows(), a_rows.ncols());
    let mut scaled = a_rows.clone();
    for e in 0..m {
        let w = 1.0 / r[e];
        for j in 0..k {
            scaled[(e, j)] *= w;
        }
    }
    a_rows.transpose() * scaled
}

fn fresh_inverse(a_rows: &DMatrix<f64>, r: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = a_rows.ncols();
    let normal = normal_matrix(a_rows, r);
    let factor = PsdFactor::new(&normal)?;
    if factor.rank() < k {
        return Err(SolverError::Singular(format!(
            "normal matrix rank {} of {}",
            factor.rank(),
            k
        )));
    }
    Ok(factor.solve_mat(&DMatrix::identity(k, k)))
}

/// Woodbury correction of `z_hat = (A^T diag(r_hat)^-1 A)^-1` to the inverse
/// at `r_tilde`, touching only the entries where the two resistance vectors
/// differ. Errors when the inner `k x k` system is singular; callers fall
/// back to a fresh inversion.
pub fn low_rank_update(
    a_rows: &DMatrix<f64>,
    z_hat: &DMatrix<f64>,
    r_hat: &DVector<f64>,
    r_tilde: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let changed: Vec<usize> = (0..r_hat.len())
        .filter(|&e| r_hat[e] != r_tilde[e])
        .collect();
    if changed.is_empty() {
        return Ok(z_hat.clone());
    }
    let k = changed.len();
    let n = a_rows.ncols();
    let mut a_s = DMatrix::<f64>::zeros(k, n);
    for (i, &e) in changed.iter().enumerate() {
        a_s.row_mut(i).copy_from(&a_rows.row(e));
    }
    // (D_tilde^-1 - D_hat^-1)^-1 is diagonal with entries
    // 1 / (1/r_tilde - 1/r_hat); negative when resistances grew.
    let mut mid = &a_s * z_hat * a_s.transpose();
    for (i, &e) in changed.iter().enumerate() {
        let dinv = 1.0 / r_tilde[e] - 1.0 / r_hat[e];
        if dinv == 0.0 {
            return Err(SolverError::Singular(
                "degenerate resistance change in low-rank update".into(),
            ));
        }
        mid[(i, i)] += 1.0 / dinv;
    }
    let lu = mid.lu();
    let za_t = z_hat * a_s.transpose();
    let solved = lu
        .solve(&za_t.transpose())
        .ok_or_else(|| SolverError::Singular("singular inner system in low-rank update".into()))?;
    Ok(z_hat - &za_t * solved)
}

/// Snapshot resistances, bucketed change counters, and the explicit inverse
/// of `A^T diag(r_hat)^-1 A`.
pub struct MaintainedInverse {
    a_rows: DMatrix<f64>,
    r_hat: DVector<f64>,
    z_hat: DMatrix<f64>,
    counters: Vec<Vec<u32>>,
    drift: DVector<f64>,
    iteration: usize,
    eta_max: usize,
    audit: bool,
    pub telemetry: Telemetry,
}

impl MaintainedInverse {
    /// Fresh state at the initial resistances: snapshot `r_hat = r0`, all
    /// counters zero, explicit inverse computed once.
    pub fn init(a_rows: DMatrix<f64>, r0: &Resistances, audit: bool) -> Result<Self> {
        let m = a_rows.nrows();
        if r0.len() != m {
            return Err(SolverError::InvalidInput(
                "resistance length does not match entry count".into(),
            ));
        }
        let z_hat = fresh_inverse(&a_rows, &r0.0)?;
        let eta_max = (m as f64).log2().ceil().max(0.0) as usize;
        let mut telemetry = Telemetry::default();
        telemetry.total_per_eta = vec![0; eta_max + 1];
        Ok(MaintainedInverse {
            r_hat: r0.0.clone(),
            z_hat,
            counters: vec![vec![0u32; eta_max + 1]; m],
            drift: DVector::zeros(m),
            iteration: 0,
            eta_max,
            audit,
            a_rows,
            telemetry,
        })
    }

    pub fn entries(&self) -> usize {
        self.a_rows.nrows()
    }

    pub fn snapshot(&self) -> &DVector<f64> {
        &self.r_hat
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.z_hat
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// `r_hat <= r_cur <= 5 log2(m) r_hat` entrywise, with roundoff slack.
    pub fn sandwich_ok(&self, r_cur: &DVector<f64>) -> bool {
        let f = sandwich_factor(self.entries());
        self.r_hat
            .iter()
            .zip(r_cur.iter())
            .all(|(&rh, &rc)| rh <= rc * (1.0 + 1e-9) && rc <= f * rh * (1.0 + 1e-9))
    }

    /// One bucketed lazy update step. `r_prev` are the resistances of the
    /// previous oracle call, `r_cur` the new ones; the global iteration index
    /// advances on every call, whether the step was a flow or a width one.
    pub fn update(&mut self, r_prev: &DVector<f64>, r_cur: &DVector<f64>) -> Result<()> {
        let m = self.entries();
        assert_eq!(r_prev.len(), m);
        assert_eq!(r_cur.len(), m);
        self.iteration += 1;
        let i = self.iteration;
        for e in 0..m {
            match bucket_index(r_prev[e], r_cur[e], self.r_hat[e], self.eta_max) {
                Some(eta) => self.counters[e][eta] += 1,
                None => {
                    let rel = ((r_cur[e] - r_prev[e]) / self.r_hat[e]).max(0.0);
                    if rel > 0.0 {
                        // Sub-bucket drift accumulates until it is worth a
                        // tick of the coarsest bucket.
                        self.drift[e] += rel;
                        let unit = 2f64.powi(-(self.eta_max as i32));
                        if self.drift[e] >= unit {
                            self.counters[e][self.eta_max] += 1;
                            self.drift[e] = 0.0;
                        }
                    }
                }
            }
        }
        let mut k_eta = vec![0usize; self.eta_max + 1];
        let mut changed = Vec::new();
        let flush_ratio = 0.98 * sandwich_factor(m);
        for e in 0..m {
            let mut hit = None;
            for eta in 0..=self.eta_max {
                if i % (1usize << eta) == 0 && self.counters[e][eta] as usize >= (1usize << eta) {
                    hit = Some(eta);
                    break;
                }
            }
            // Safety flush: never let a stale entry threaten the sandwich.
            if hit.is_none() && r_cur[e] > flush_ratio * self.r_hat[e] {
                hit = Some(0);
            }
            if let Some(eta) = hit {
                k_eta[eta] += 1;
                changed.push(e);
            }
        }
        let mut pc_placeholder = 0usize;
        if !changed.is_empty() {
            let mut r_tilde = self.r_hat.clone();
            for &e in &changed {
                r_tilde[e] = r_cur[e];
            }
            // Woodbury loses its advantage for large update sets.
            let z_new = if changed.len() > m / 4 {
                self.telemetry.full_reinversions += 1;
                fresh_inverse(&self.a_rows, &r_tilde)?
            } else {
                match low_rank_update(&self.a_rows, &self.z_hat, &self.r_hat, &r_tilde) {
                    Ok(z) => z,
                    Err(_) => {
                        self.telemetry.full_reinversions += 1;
                        fresh_inverse(&self.a_rows, &r_tilde)?
                    }
                }
            };
            if self.audit {
                if let Ok(fresh) = fresh_inverse(&self.a_rows, &r_tilde) {
                    let err = (&z_new - &fresh).amax();
                    if err > self.telemetry.woodbury_max_err {
                        self.telemetry.woodbury_max_err = err;
                    }
                    if err > WOODBURY_TOL {
                        self.telemetry.violations.push(format!(
                            "woodbury vs fresh inverse max-entry error {err:.3e} at iteration {i}"
                        ));
                    }
                }
            }
            self.z_hat = z_new;
            self.r_hat = r_tilde;
            for &e in &changed {
                self.counters[e].fill(0);
                self.drift[e] = 0.0;
            }
            pc_placeholder = 0;
        }
        if self.audit && !self.sandwich_ok(r_cur) {
            self.telemetry.violations.push(format!(
                "resistance sandwich violated at iteration {i}"
            ));
        }
        for (eta, &k) in k_eta.iter().enumerate() {
            self.telemetry.total_per_eta[eta] += k;
        }
        self.telemetry.rows.push(TelemetryRow {
            iteration: i,
            changed: changed.len(),
            k_eta,
            pc_iterations: pc_placeholder,
        });
        Ok(())
    }

    fn apply_normal(&self, r: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut t = &self.a_rows * v;
        for e in 0..t.len() {
            t[e] /= r[e];
        }
        self.a_rows.transpose() * t
    }

    /// Solves `(A^T diag(r_cur)^-1 A) x = rhs` by conjugate gradients
    /// preconditioned with the maintained inverse, to relative residual
    /// `tol`. Returns the solution and the iteration count. Falls back to a
    /// fresh factorization (and resets the snapshot) if the iteration budget
    /// is exceeded tenfold.
    pub fn preconditioned_solve(
        &mut self,
        r_cur: &DVector<f64>,
        rhs: &DVector<f64>,
        tol: f64,
    ) -> Result<(DVector<f64>, usize)> {
        let k = self.a_rows.ncols();
        assert_eq!(rhs.len(), k);
        let rhs_norm = rhs.norm();
        if rhs_norm == 0.0 {
            self.record_pc(0);
            return Ok((DVector::zeros(k), 0));
        }
        let m = self.entries();
        let budget = (PC_BUDGET_CONST * (5.0 * (m as f64).log2().max(1.0)).sqrt()
            * (1.0 / tol).ln())
        .ceil() as usize;
        let hard_cap = (10 * budget).max(20).min(8 * k + 40);
        let mut x = DVector::<f64>::zeros(k);
        let mut resid = rhs.clone();
        let mut z = &self.z_hat * &resid;
        let mut p = z.clone();
        let mut rz = resid.dot(&z);
        let mut iters = 0usize;
        while iters < hard_cap {
            let q = self.apply_normal(r_cur, &p);
            let pq = p.dot(&q);
            if !(pq.is_finite() && pq > 0.0) {
                break;
            }
            let alpha = rz / pq;
            x += &p * alpha;
            resid -= &q * alpha;
            iters += 1;
            if resid.norm() <= tol * rhs_norm {
                self.record_pc(iters);
                return Ok((x, iters));
            }
            z = &self.z_hat * &resid;
            let rz_new = resid.dot(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            p = &z + &p * beta;
        }
        // Fresh factorization fallback; the snapshot is re-anchored at the
        // live resistances so later updates start clean.
        self.telemetry.full_reinversions += 1;
        self.z_hat = fresh_inverse(&self.a_rows, r_cur)?;
        self.r_hat = r_cur.clone();
        for c in &mut self.counters {
            c.fill(0);
        }
        self.drift.fill(0.0);
        let x = &self.z_hat * rhs;
        self.record_pc(iters);
        Ok((x, iters))
    }

    fn record_pc(&mut self, iters: usize) {
        if let Some(row) = self.telemetry.rows.last_mut() {
            row.pc_iterations = iters;
        }
    }
}
