//! Multiplicative-weights solver for the scaled subproblem
//! `min gamma(t, d)` s.t. `A_hat d = (0, ..., 0, c)` with thresholds clamped
//! to `[m^(-1/p), 1]`, for `p >= 2`.
//!
//! Each iteration asks an oracle for the weighted least-squares minimizer
//! under resistances `r_e = (m^(1/p) t_e)^(p-2) + w_e^(p-2)`. If the step has
//! small `||.||_p^p` it is accepted (a *flow step*: weights and the running
//! solution both move by `alpha` times the step); otherwise the entries that
//! are wide but still cheap get their weights inflated so that their
//! resistance at least doubles (a *width-reduction step*). After `T` flow
//! steps the accumulated solution, scaled by `m^(-1/p)`, meets the constraint
//! stack exactly and its smoothed objective is controlled by the potential
//! `Phi(w) = gamma(m^(1/p) t, w)`.
//!
//! In audit mode every step is checked against the facts the analysis
//! promises: resistance ratios on width-updated entries stay in `[2, 4]`,
//! the electrical energy never shrinks and obeys the exponential growth lower
//! bound on width steps, per-entry resistance growth on flow steps is bounded
//! by `(1 + alpha |d_e|)^(p-2) - 1`, `w >= |x|` entrywise, and `Phi` respects
//! both its per-step induction and its closed-form envelope. Violations are
//! collected, not panicked, so a whole suite can be audited in one run.

use crate::error::{Result, SolverError};
use crate::gamma::{gamma_prime, gamma_sum, SmoothingVector};
use crate::invmaint::{MaintainedInverse, Telemetry, PC_TOL};
use crate::lin::{op_norm, pnorm_pow, pow_pos};
use crate::quad::{solve_weighted_l2, ConstraintStack, Resistances, FEASIBILITY_TOL};
use nalgebra::DVector;
use serde::Serialize;

/// Tunable leading constants of the width-reduction parameters.
#[derive(Debug, Clone, Copy)]
pub struct MwuConstants {
    pub c_rho: f64,
    pub c_beta: f64,
    pub c_alpha: f64,
    pub c_tau: f64,
    pub c_k: f64,
}

impl Default for MwuConstants {
    fn default() -> Self {
        MwuConstants {
            c_rho: 1.0,
            c_beta: 1.0,
            c_alpha: 1.0,
            c_tau: 1.0,
            c_k: 2.0,
        }
    }
}

/// Width parameter, resistance threshold, step size, and energy threshold of
/// one solver run, derived from `(p, m)` with the consistency conditions
/// enforced at construction:
///
/// 1. `alpha^p tau <= alpha m^((p-1)/p)` (flow steps cannot blow up `Phi`),
/// 2. `tau^(2/p) >= 2 m^((p-2)/p) / beta_r`,
/// 3. `tau / 10 >= rho^(p-2) m^((p-2)/p)` (width steps grow the energy).
///
/// `c_tau` is raised minimally to satisfy 2 and 3; the step size is then
/// lowered (equivalently, the flow budget `T` raised) to restore 1. `T` is
/// rounded to an integer and `alpha` re-derived as `m^(1/p) / T`, so that `T`
/// flow steps meet the demand exactly.
#[derive(Debug, Clone)]
pub struct MwuParams {
    pub p: f64,
    pub m: usize,
    pub rho: f64,
    pub beta_r: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Flow-step budget `T` with `T * alpha = m^(1/p)`.
    pub flow_budget: usize,
    /// Width-step budget `ceil(c_k rho^2 m^(2/p) beta_r^(-2/(p-2)))`.
    pub width_budget: usize,
    pub constants: MwuConstants,
}

impl MwuParams {
    pub fn derive(p: f64, m: usize, constants: MwuConstants) -> Result<Self> {
        if !(p.is_finite() && p >= 2.0) {
            return Err(SolverError::InvalidInput(format!(
                "width-reduction parameters need p >= 2, got {p}"
            )));
        }
        if m == 0 {
            return Err(SolverError::InvalidInput("empty instance".into()));
        }
        let mf = m as f64;
        if p == 2.0 {
            // The width machinery is vacuous at p = 2; the solver short
            // circuits to a single weighted l2 solve.
            return Ok(MwuParams {
                p,
                m,
                rho: 1.0,
                beta_r: 1.0,
                alpha: 1.0,
                tau: f64::INFINITY,
                flow_budget: 1,
                width_budget: 0,
                constants,
            });
        }
        let d = 3.0 * p - 2.0;
        let rho = constants.c_rho * pow_pos(mf, (p * p - 4.0 * p + 2.0) / (p * d));
        let beta_r = constants.c_beta * pow_pos(mf, (p - 2.0) / d);
        let alpha0 = constants.c_alpha * pow_pos(mf, -(p * p - 5.0 * p + 2.0) / (p * d));
        let mut tau = constants.c_tau * pow_pos(mf, (p - 1.0) * (p - 2.0) / d);
        // Condition 2.
        let need2 = 2.0 * pow_pos(mf, (p - 2.0) / p) / beta_r;
        tau = tau.max(pow_pos(need2, p / 2.0));
        // Condition 3.
        tau = tau.max(10.0 * pow_pos(rho, p - 2.0) * pow_pos(mf, (p - 2.0) / p));
        // Condition 1 caps the step size; the flow budget absorbs the rest.
        let alpha_cap = pow_pos(pow_pos(mf, (p - 1.0) / p) / tau, 1.0 / (p - 1.0));
        let alpha_target = alpha0.min(alpha_cap);
        let mroot = pow_pos(mf, 1.0 / p);
        let flow_budget = (mroot / alpha_target).ceil().max(1.0) as usize;
        let alpha = mroot / flow_budget as f64;
        let width_budget = (constants.c_k * rho * rho * pow_pos(mf, 2.0 / p)
            * pow_pos(beta_r, -2.0 / (p - 2.0)))
        .ceil()
        .max(1.0) as usize;
        let params = MwuParams {
            p,
            m,
            rho,
            beta_r,
            alpha,
            tau,
            flow_budget,
            width_budget,
            constants,
        };
        for v in [params.rho, params.beta_r, params.alpha, params.tau] {
            if !v.is_finite() || v <= 0.0 {
                return Err(SolverError::InvalidInput(format!(
                    "derived width-reduction parameters are degenerate: {params:?}"
                )));
            }
        }
        debug_assert!(
            pow_pos(params.alpha, p) * params.tau
                <= params.alpha * pow_pos(mf, (p - 1.0) / p) * (1.0 + 1e-9)
        );
        debug_assert!(pow_pos(params.tau, 2.0 / p) * params.beta_r >= 2.0 * pow_pos(mf, (p - 2.0) / p) * (1.0 - 1e-9));
        debug_assert!(params.tau / 10.0 >= pow_pos(params.rho, p - 2.0) * pow_pos(mf, (p - 2.0) / p) * (1.0 - 1e-9));
        Ok(params)
    }
}

/// Resistances of the oracle: `r_e = (m^(1/p) t_e)^(p-2) + w_e^(p-2)`.
/// Thresholds must already be clamped to `[m^(-1/p), 1]`, which keeps every
/// resistance at least 1 (`0^0` counts as 1 so that `p = 2` yields `r = 2`).
pub fn oracle_resistances(
    p: f64,
    t: &SmoothingVector,
    w: &DVector<f64>,
    m: usize,
) -> Result<Resistances> {
    if !t.is_clamped(p, m) {
        return Err(SolverError::InvalidInput(
            "oracle thresholds must be clamped to [m^(-1/p), 1]".into(),
        ));
    }
    if t.len() != w.len() {
        return Err(SolverError::InvalidInput(
            "threshold/weight length mismatch".into(),
        ));
    }
    let mroot = pow_pos(m as f64, 1.0 / p);
    let r = DVector::from_iterator(
        t.len(),
        t.0.iter()
            .zip(w.iter())
            .map(|(&te, &we)| pow_pos(mroot * te, p - 2.0) + pow_pos(we, p - 2.0)),
    );
    Resistances::new(r)
}

/// One weighted least-squares answer from the oracle's kernel.
pub struct KernelSolution {
    /// Minimizer in the residual (edge) space.
    pub delta: DVector<f64>,
    /// `sum_e r_e delta_e^2` at the minimizer.
    pub energy: f64,
    /// Preimage of `delta` in the parameter space, when the kernel's edge
    /// variables are the image of a smaller parameterization.
    pub param_delta: Option<DVector<f64>>,
}

/// The weighted least-squares oracle hiding the constraint structure: dense
/// stacks, graph Laplacians with border rows, or composite quadratics.
pub trait L2Kernel {
    fn edges(&self) -> usize;
    /// Minimize `sum_e r_e d_e^2` over the kernel's affine constraint set.
    fn solve(&mut self, r: &Resistances) -> Result<KernelSolution>;
    /// Lower bound `||demand||^2 / ||A_hat||^2` on the initial energy; used
    /// only by the audit.
    fn psi_floor(&mut self) -> f64;
    /// Telemetry of the lazily maintained inverse, when the kernel keeps one.
    fn maintenance_telemetry(&self) -> Option<&Telemetry> {
        None
    }
}

/// Dense-stack kernel: the constraints are an explicit matrix, fresh
/// factorization per call, or a maintained-inverse preconditioned solve when
/// enabled.
pub struct DenseStackKernel {
    stack: ConstraintStack,
    maintain: bool,
    audit: bool,
    state: Option<MaintainedInverse>,
    maintenance_disabled: bool,
    r_prev: Option<DVector<f64>>,
    psi_floor_cache: Option<f64>,
}

impl DenseStackKernel {
    pub fn new(stack: ConstraintStack, maintain: bool, audit: bool) -> Self {
        DenseStackKernel {
            stack,
            maintain,
            audit,
            state: None,
            maintenance_disabled: false,
            r_prev: None,
            psi_floor_cache: None,
        }
    }

    fn solve_maintained(&mut self, r: &Resistances) -> Result<KernelSolution> {
        if self.state.is_none() {
            let a_rows = self.stack.a_hat.transpose();
            match MaintainedInverse::init(a_rows, r, self.audit) {
                Ok(mi) => self.state = Some(mi),
                Err(_) => {
                    // Singular stack: maintenance cannot hold an inverse;
                    // fall back to fresh pseudo-solves for this kernel.
                    self.maintenance_disabled = true;
                    return solve_fresh(&self.stack, r);
                }
            }
        } else {
            let prev = self.r_prev.as_ref().expect("previous resistances cached");
            self.state.as_mut().unwrap().update(prev, &r.0)?;
        }
        let mi = self.state.as_mut().unwrap();
        let (y, _iters) = mi.preconditioned_solve(&r.0, &self.stack.d, PC_TOL)?;
        let mut delta = self.stack.a_hat.transpose() * &y;
        for e in 0..delta.len() {
            delta[e] /= r.0[e];
        }
        let resid = (&self.stack.a_hat * &delta - &self.stack.d).norm();
        if resid > FEASIBILITY_TOL * self.stack.d.norm().max(1.0) {
            return solve_fresh(&self.stack, r);
        }
        let energy = self.stack.d.dot(&y).max(0.0);
        Ok(KernelSolution {
            delta,
            energy,
            param_delta: None,
        })
    }
}

fn solve_fresh(stack: &ConstraintStack, r: &Resistances) -> Result<KernelSolution> {
    let sol = solve_weighted_l2(stack, r)?;
    Ok(KernelSolution {
        delta: sol.delta,
        energy: sol.energy,
        param_delta: None,
    })
}

impl L2Kernel for DenseStackKernel {
    fn edges(&self) -> usize {
        self.stack.a_hat.ncols()
    }

    fn solve(&mut self, r: &Resistances) -> Result<KernelSolution> {
        let out = if self.maintain && !self.maintenance_disabled {
            self.solve_maintained(r)
        } else {
            solve_fresh(&self.stack, r)
        };
        self.r_prev = Some(r.0.clone());
        out
    }

    fn psi_floor(&mut self) -> f64 {
        if self.psi_floor_cache.is_none() {
            let nrm = op_norm(&self.stack.a_hat);
            let d2 = self.stack.d.norm_squared();
            self.psi_floor_cache = Some(if nrm > 0.0 { d2 / (nrm * nrm) } else { 0.0 });
        }
        self.psi_floor_cache.unwrap()
    }

    fn maintenance_telemetry(&self) -> Option<&Telemetry> {
        self.state.as_ref().map(|s| &s.telemetry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StepType {
    Flow,
    WidthReduction,
}

/// One row of the per-step trace.
#[derive(Debug, Clone, Serialize)]
pub struct MwuTraceRow {
    pub i: usize,
    pub k: usize,
    pub step_type: StepType,
    pub lp_norm_delta: f64,
    pub phi: f64,
    pub psi: f64,
    pub n_width_entries: usize,
}

/// CSV export of a trace, one row per oracle call.
pub fn trace_to_csv(rows: &[MwuTraceRow]) -> String {
    let mut s = String::from("i,k,step_type,lp_norm_delta,phi,psi,n_width_entries\n");
    for r in rows {
        let st = match r.step_type {
            StepType::Flow => "flow",
            StepType::WidthReduction => "width",
        };
        s.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e},{}\n",
            r.i, r.k, st, r.lp_norm_delta, r.phi, r.psi, r.n_width_entries
        ));
    }
    s
}

/// Result of one multiplicative-weights run.
pub struct GammaSolverOutcome {
    /// Solution in the residual (edge) space, already scaled by `m^(-1/p)`;
    /// it satisfies the kernel's constraint stack.
    pub x: DVector<f64>,
    /// Parameter-space preimage when the kernel is a composite one.
    pub param_x: Option<DVector<f64>>,
    /// `gamma(t, x)` of the returned solution.
    pub gamma_value: f64,
    pub flow_steps: usize,
    pub width_steps: usize,
    pub oracle_calls: usize,
    pub trace: Vec<MwuTraceRow>,
    /// Audit violations (empty when the audit is off or everything held).
    pub violations: Vec<String>,
    /// Telemetry of the maintained inverse, if the kernel kept one.
    pub maintenance: Option<Telemetry>,
}

struct Audit {
    enabled: bool,
    violations: Vec<String>,
}

impl Audit {
    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if self.enabled && !ok {
            self.violations.push(msg());
        }
    }
}

/// Runs the multiplicative-weights loop on one scaled subproblem.
///
/// The caller is responsible for pre-scaling so the subproblem optimum is at
/// most 1 (the bin search does this); the returned `gamma_value` reports what
/// was actually achieved.
pub fn gamma_solver(
    kernel: &mut dyn L2Kernel,
    t: &SmoothingVector,
    params: &MwuParams,
    audit_enabled: bool,
) -> Result<GammaSolverOutcome> {
    let m = kernel.edges();
    let p = params.p;
    if t.len() != m {
        return Err(SolverError::InvalidInput(format!(
            "thresholds have {} entries, kernel has {} edges",
            t.len(),
            m
        )));
    }
    if !t.is_clamped(p, m) {
        return Err(SolverError::InvalidInput(
            "thresholds must be clamped to [m^(-1/p), 1]".into(),
        ));
    }
    let mf = m as f64;
    let mroot = pow_pos(mf, 1.0 / p);
    let mut audit = Audit {
        enabled: audit_enabled,
        violations: Vec::new(),
    };

    if p == 2.0 {
        // Degenerate exponents: every resistance is 2 regardless of weights,
        // so one weighted l2 solve is the whole loop.
        let r = oracle_resistances(p, t, &DVector::zeros(m), m)?;
        let sol = kernel.solve(&r)?;
        let gamma_value = gamma_sum(p, &t.0, &sol.delta);
        let phi = gamma_sum(p, &(t.0.clone() * mroot), &sol.delta);
        let trace = vec![MwuTraceRow {
            i: 1,
            k: 0,
            step_type: StepType::Flow,
            lp_norm_delta: pnorm_pow(&sol.delta, p),
            phi,
            psi: sol.energy,
            n_width_entries: 0,
        }];
        let maintenance = kernel.maintenance_telemetry().cloned();
        return Ok(GammaSolverOutcome {
            x: sol.delta,
            param_x: sol.param_delta,
            gamma_value,
            flow_steps: 1,
            width_steps: 0,
            oracle_calls: 1,
            trace,
            violations: audit.violations,
            maintenance,
        });
    }

    let mt = &t.0 * mroot;
    let mut w = DVector::<f64>::zeros(m);
    let mut x = DVector::<f64>::zeros(m);
    let mut param_x: Option<DVector<f64>> = None;
    let mut phi = 0.0f64;
    let mut i = 0usize;
    let mut k = 0usize;
    let mut oracle_calls = 0usize;
    let mut trace: Vec<MwuTraceRow> = Vec::new();
    // Lower bound the next solve's energy must respect: psi of the previous
    // solve on flow steps, the exponential growth bound on width steps.
    let mut pending_psi_floor: Option<f64> = None;
    let width_factor = pow_pos(4.0, 1.0 / (p - 2.0));
    if !width_factor.is_finite() {
        return Err(SolverError::InvalidInput(format!(
            "width multiplier 4^(1/(p-2)) overflows for p = {p}"
        )));
    }
    // Envelope constant: each width step multiplies max(Phi, m) by at most
    // 1 + C / (rho^2 m^(2/p) beta_r^(-2/(p-2))) with C = 2 (4^(p/(p-2)) + p/2).
    let c1 = pow_pos(4.0, p / (p - 2.0)) + 0.5 * p;
    let env_denom =
        params.rho * params.rho * pow_pos(mf, 2.0 / p) * pow_pos(params.beta_r, -2.0 / (p - 2.0));

    while i < params.flow_budget {
        let r = oracle_resistances(p, t, &w, m)?;
        let sol = kernel.solve(&r)?;
        oracle_calls += 1;
        let psi = sol.energy;
        if audit.enabled && oracle_calls == 1 {
            let floor = kernel.psi_floor();
            audit.check(psi >= floor * (1.0 - 1e-9), || {
                format!("initial energy {psi:.6e} below demand/op-norm floor {floor:.6e}")
            });
        }
        if let Some(floor) = pending_psi_floor.take() {
            audit.check(psi >= floor * (1.0 - 1e-9), || {
                format!("energy {psi:.6e} fell below its lower bound {floor:.6e} (i={i}, k={k})")
            });
        }
        let lp = pnorm_pow(&sol.delta, p);
        if !lp.is_finite() {
            return Err(SolverError::Singular(format!(
                "oracle step has non-finite p-norm at i={i}, k={k}"
            )));
        }
        if lp <= params.tau {
            // Flow step.
            if audit.enabled {
                if i % 4 == 0 {
                    // Dot-product bound of the oracle against the weight
                    // gradient (sampled; it is O(m) worth of powf calls).
                    let dot: f64 = (0..m)
                        .map(|e| sol.delta[e].abs() * gamma_prime(p, mt[e], w[e]).abs())
                        .sum();
                    let bound = p * pow_pos(phi, (p - 1.0) / p)
                        + p * pow_pos(mf, (p - 2.0) / (2.0 * p)) * phi.sqrt();
                    audit.check(dot <= bound * (1.0 + 1e-9) + 1e-12, || {
                        format!("oracle dot-product bound failed at i={i}: {dot:.6e} > {bound:.6e}")
                    });
                }
                // Relative resistance growth per entry on a flow step.
                for e in 0..m {
                    let r_new_e =
                        pow_pos(mt[e], p - 2.0) + pow_pos(w[e] + params.alpha * sol.delta[e].abs(), p - 2.0);
                    let rel = (r_new_e - r.0[e]) / r.0[e];
                    let cap = pow_pos(1.0 + params.alpha * sol.delta[e].abs(), p - 2.0) - 1.0;
                    if rel > cap * (1.0 + 1e-9) + 1e-12 {
                        audit.violations.push(format!(
                            "flow-step resistance growth {rel:.6e} above cap {cap:.6e} at entry {e}, i={i}"
                        ));
                        break;
                    }
                }
            }
            w += sol.delta.abs() * params.alpha;
            x += &sol.delta * params.alpha;
            if let Some(pd) = &sol.param_delta {
                match &mut param_x {
                    Some(acc) => *acc += pd * params.alpha,
                    None => param_x = Some(pd * params.alpha),
                }
            }
            i += 1;
            let phi_new = gamma_sum(p, &mt, &w);
            if audit.enabled {
                let z = phi.max(mf).powf(1.0 / p);
                let step_cap = (z + p * p * pow_pos(2.0, p) * params.alpha).powf(p);
                audit.check(phi_new <= step_cap * (1.0 + 1e-9), || {
                    format!("flow step Phi induction failed at i={i}: {phi_new:.6e} > {step_cap:.6e}")
                });
            }
            phi = phi_new;
            pending_psi_floor = Some(psi);
            trace.push(MwuTraceRow {
                i,
                k,
                step_type: StepType::Flow,
                lp_norm_delta: lp,
                phi,
                psi,
                n_width_entries: 0,
            });
        } else {
            // Width-reduction step.
            if k >= params.width_budget {
                return Err(SolverError::BudgetExceeded(format!(
                    "width-reduction budget {} exhausted (i={i}); the parameter constants are too small for this instance",
                    params.width_budget
                )));
            }
            let qualifying: Vec<usize> = (0..m)
                .filter(|&e| sol.delta[e].abs() >= params.rho && r.0[e] <= params.beta_r)
                .collect();
            if qualifying.is_empty() {
                let max_d = sol.delta.abs().max();
                return Err(SolverError::StalledWidthStep(format!(
                    "||delta||_p^p = {lp:.3e} > tau = {:.3e} but no entry has |delta_e| >= rho = {:.3e} with r_e <= beta_r = {:.3e} (max |delta_e| = {max_d:.3e})",
                    params.tau, params.rho, params.beta_r
                )));
            }
            let mut r_new = r.0.clone();
            for &e in &qualifying {
                let w_new = width_factor * mt[e].max(w[e]);
                if audit.enabled {
                    let r_after = pow_pos(mt[e], p - 2.0) + pow_pos(w_new, p - 2.0);
                    let ratio = r_after / r.0[e];
                    audit.check((2.0 * (1.0 - 1e-9)..=4.0 * (1.0 + 1e-9)).contains(&ratio), || {
                        format!("width-step resistance ratio {ratio:.6} outside [2, 4] at entry {e}, k={k}")
                    });
                    r_new[e] = r_after;
                }
                w[e] = w_new;
            }
            k += 1;
            let phi_new = gamma_sum(p, &mt, &w);
            if audit.enabled {
                let increment_cap = c1
                    * pow_pos(params.beta_r, 2.0 / (p - 2.0))
                    * psi
                    / (params.rho * params.rho);
                audit.check(phi_new <= phi + increment_cap * (1.0 + 1e-9) + 1e-12, || {
                    format!(
                        "width step Phi increment {:.6e} above cap {increment_cap:.6e} at k={k}",
                        phi_new - phi
                    )
                });
                let growth = crate::quad::energy_growth_lower_bound(
                    &sol.delta,
                    &r,
                    &Resistances(r_new.clone()),
                    psi,
                );
                pending_psi_floor = Some(growth);
            } else {
                pending_psi_floor = Some(psi);
            }
            phi = phi_new;
            trace.push(MwuTraceRow {
                i,
                k,
                step_type: StepType::WidthReduction,
                lp_norm_delta: lp,
                phi,
                psi,
                n_width_entries: qualifying.len(),
            });
        }
        if audit.enabled {
            let wx_ok = (0..m).all(|e| w[e] >= x[e].abs() * (1.0 - 1e-12) - 1e-15);
            audit.check(wx_ok, || {
                format!("weights fell below |x| at i={i}, k={k}")
            });
            let phi_recomputed = gamma_sum(p, &mt, &w);
            audit.check(
                (phi - phi_recomputed).abs() <= 1e-9 * phi_recomputed.max(1.0),
                || format!("cached Phi {phi:.12e} drifted from recomputed {phi_recomputed:.12e}"),
            );
            let envelope = (p * p * pow_pos(2.0, p) * params.alpha * i as f64 + mroot).powf(p)
                * (2.0 * c1 * k as f64 / env_denom).exp();
            audit.check(phi <= envelope * (1.0 + 1e-9), || {
                format!("Phi envelope violated at i={i}, k={k}: {phi:.6e} > {envelope:.6e}")
            });
        }
    }

    let scale = pow_pos(mf, -1.0 / p);
    let x_out = &x * scale;
    let param_out = param_x.map(|v| v * scale);
    let gamma_value = gamma_sum(p, &t.0, &x_out);
    if audit.enabled && gamma_value <= 1.0 + 1e-9 {
        // With the achieved objective at most 1, the subproblem optimum is
        // too, and the energy upper bound applies at every recorded step.
        let cap_const = pow_pos(mf, (p - 2.0) / p);
        let mut phi_before = 0.0;
        for row in &trace {
            let cap = cap_const + pow_pos(phi_before, (p - 2.0) / p);
            if row.psi > cap * (1.0 + 1e-9) {
                audit.violations.push(format!(
                    "energy {:.6e} above its upper bound {cap:.6e} at i={}, k={}",
                    row.psi, row.i, row.k
                ));
            }
            phi_before = row.phi;
        }
    }
    let maintenance = kernel.maintenance_telemetry().cloned();
    if let Some(mt_tel) = &maintenance {
        audit.violations.extend(mt_tel.violations.iter().cloned());
    }
    Ok(GammaSolverOutcome {
        x: x_out,
        param_x: param_out,
        gamma_value,
        flow_steps: i,
        width_steps: k,
        oracle_calls,
        trace,
        violations: audit.violations,
        maintenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn clamped_thresholds(vals: &[f64]) -> SmoothingVector {
        SmoothingVector::new(DVector::from_row_slice(vals)).unwrap()
    }

    #[test]
    fn params_satisfy_conditions() {
        for &(p, m) in &[(2.5, 100usize), (3.0, 64), (4.0, 64), (4.0, 1024), (8.0, 100)] {
            let pr = MwuParams::derive(p, m, MwuConstants::default()).unwrap();
            let mf = m as f64;
            assert!(pr.alpha.powf(p) * pr.tau <= pr.alpha * mf.powf((p - 1.0) / p) * (1.0 + 1e-9));
            assert!(pr.tau.powf(2.0 / p) >= 2.0 * mf.powf((p - 2.0) / p) / pr.beta_r * (1.0 - 1e-9));
            assert!(pr.tau / 10.0 >= pr.rho.powf(p - 2.0) * mf.powf((p - 2.0) / p) * (1.0 - 1e-9));
            assert_relative_eq!(
                pr.alpha * pr.flow_budget as f64,
                mf.powf(1.0 / p),
                epsilon = 1e-10
            );
            assert!(pr.width_budget >= 1);
        }
    }

    #[test]
    fn oracle_resistances_values() {
        // m=16, p=4, t=0.5, w=1: (2 * 0.5)^2 + 1 = 2.
        let t = clamped_thresholds(&[0.5]);
        let w = DVector::from_row_slice(&[1.0]);
        let r = oracle_resistances(4.0, &t, &w, 16).unwrap();
        assert_relative_eq!(r.0[0], 2.0, epsilon = 1e-12);
        // Lower boundary: w = 0, t = m^(-1/p) gives r = 1 + 0 = 1... with
        // 0^(p-2) = 0 for p > 2.
        let t = clamped_thresholds(&[16f64.powf(-0.25)]);
        let w = DVector::from_row_slice(&[0.0]);
        let r = oracle_resistances(4.0, &t, &w, 16).unwrap();
        assert_relative_eq!(r.0[0], 1.0, epsilon = 1e-12);
        // p = 2: zeroth powers make r = 2 for any inputs.
        let t = clamped_thresholds(&[0.7]);
        let w = DVector::from_row_slice(&[3.0]);
        let r = oracle_resistances(2.0, &t, &w, 4).unwrap();
        assert_relative_eq!(r.0[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn oracle_rejects_unclamped_thresholds() {
        let t = clamped_thresholds(&[1e-6]);
        let w = DVector::from_row_slice(&[0.0]);
        assert!(oracle_resistances(4.0, &t, &w, 16).is_err());
    }

    #[test]
    fn width_update_values() {
        // p=4, m=16, t=0.5, w=1.5: new weight 4^(1/2) * max(2*0.5, 1.5) = 3.
        let p = 4.0;
        let factor = 4f64.powf(1.0 / (p - 2.0));
        assert_relative_eq!(factor * (1.0f64).max(1.5), 3.0);
        // w = 0: the threshold term wins, 2 * m^(1/p) t.
        assert_relative_eq!(factor * (1.0f64).max(0.0), 2.0);
    }

    #[test]
    fn zero_demand_returns_zero() {
        let m = 6;
        let p = 4.0;
        let a = DMatrix::from_fn(2, m, |i, j| ((i * m + j) as f64 * 0.37).sin());
        let mut a_hat = DMatrix::<f64>::zeros(3, m);
        a_hat.rows_mut(0, 2).copy_from(&a);
        a_hat
            .row_mut(2)
            .copy_from(&DMatrix::from_fn(1, m, |_, j| (j as f64 + 1.0) * 0.1));
        let stack = ConstraintStack::new(a_hat, DVector::zeros(3)).unwrap();
        let mut kernel = DenseStackKernel::new(stack, false, false);
        let t = SmoothingVector::new(DVector::from_element(m, 1.0)).unwrap();
        let params = MwuParams::derive(p, m, MwuConstants::default()).unwrap();
        let out = gamma_solver(&mut kernel, &t, &params, true).unwrap();
        assert_relative_eq!(out.x.norm(), 0.0, epsilon = 1e-12);
        assert_eq!(out.flow_steps, params.flow_budget);
        assert_eq!(out.width_steps, 0);
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert_relative_eq!(out.gamma_value, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn one_dimensional_instance_recovers_ratio() {
        // Single variable, single constraint g x = c: the only feasible
        // point is c / g.
        let g = 2.0;
        let c = 0.5;
        let p = 4.0;
        let a_hat = DMatrix::from_row_slice(1, 1, &[g]);
        let stack = ConstraintStack::new(a_hat, DVector::from_row_slice(&[c])).unwrap();
        let mut kernel = DenseStackKernel::new(stack, false, false);
        let t = SmoothingVector::new(DVector::from_element(1, 1.0)).unwrap();
        let params = MwuParams::derive(p, 1, MwuConstants::default()).unwrap();
        let out = gamma_solver(&mut kernel, &t, &params, true).unwrap();
        assert_relative_eq!(out.x[0], c / g, epsilon = 1e-10);
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        let direct = crate::gamma::gamma(p, 1.0, c / g);
        assert_relative_eq!(out.gamma_value, direct, epsilon = 1e-10);
    }

    #[test]
    fn p2_short_circuit_solves_once() {
        let a_hat = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let stack = ConstraintStack::new(a_hat.clone(), DVector::from_row_slice(&[1.0])).unwrap();
        let mut kernel = DenseStackKernel::new(stack, false, false);
        let t = SmoothingVector::new(DVector::from_element(2, 1.0)).unwrap();
        let params = MwuParams::derive(2.0, 2, MwuConstants::default()).unwrap();
        let out = gamma_solver(&mut kernel, &t, &params, true).unwrap();
        assert_eq!(out.oracle_calls, 1);
        assert_relative_eq!(out.x[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(out.x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn constraints_hold_on_random_instance() {
        let m = 24;
        let n = 4;
        let p = 3.0;
        let a = DMatrix::from_fn(n, m, |i, j| ((i * m + j) as f64 * 0.61).sin());
        let g = DVector::from_fn(m, |e, _| ((e as f64) * 0.23).cos());
        let mut a_hat = DMatrix::<f64>::zeros(n + 1, m);
        a_hat.rows_mut(0, n).copy_from(&a);
        a_hat.row_mut(n).copy_from(&g.transpose());
        let c = 0.3;
        let mut d = DVector::zeros(n + 1);
        d[n] = c;
        let stack = ConstraintStack::new(a_hat.clone(), d.clone()).unwrap();
        let mut kernel = DenseStackKernel::new(stack, false, false);
        let t = SmoothingVector::new(DVector::from_element(m, 0.8)).unwrap();
        let params = MwuParams::derive(p, m, MwuConstants::default()).unwrap();
        let out = gamma_solver(&mut kernel, &t, &params, true).unwrap();
        let resid = (&a_hat * &out.x - &d).norm();
        assert!(resid <= 1e-8, "stacked constraint residual {resid}");
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert!(out.flow_steps == params.flow_budget);
    }

    #[test]
    fn maintained_and_fresh_agree() {
        let m = 20;
        let n = 3;
        let p = 4.0;
        let a = DMatrix::from_fn(n, m, |i, j| ((i * m + j) as f64 * 0.7).cos());
        let g = DVector::from_fn(m, |e, _| 0.4 + ((e as f64) * 0.11).sin().abs());
        let mut a_hat = DMatrix::<f64>::zeros(n + 1, m);
        a_hat.rows_mut(0, n).copy_from(&a);
        a_hat.row_mut(n).copy_from(&g.transpose());
        let mut d = DVector::zeros(n + 1);
        d[n] = 0.2;
        let t = SmoothingVector::new(DVector::from_element(m, 0.9)).unwrap();
        let params = MwuParams::derive(p, m, MwuConstants::default()).unwrap();

        let stack = ConstraintStack::new(a_hat.clone(), d.clone()).unwrap();
        let mut fresh = DenseStackKernel::new(stack.clone(), false, false);
        let out_fresh = gamma_solver(&mut fresh, &t, &params, false).unwrap();
        let mut lazy = DenseStackKernel::new(stack, true, true);
        let out_lazy = gamma_solver(&mut lazy, &t, &params, true).unwrap();
        assert!(out_lazy.violations.is_empty(), "{:?}", out_lazy.violations);
        assert!(
            (&out_fresh.x - &out_lazy.x).amax() <= 1e-7,
            "maintained vs fresh max diff {}",
            (&out_fresh.x - &out_lazy.x).amax()
        );
        assert!(out_lazy.maintenance.is_some());
    }
}
