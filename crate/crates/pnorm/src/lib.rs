//! High-accuracy minimization of `||x||_p` over affine constraints `A x = b`
//! for `1 < p < infinity`, plus the graph specializations (p-norm flows and
//! Lipschitz vertex labelling).
//!
//! The solver is an iterative-refinement scheme: each outer step improves the
//! current iterate by a constant factor using a crude solution of a *residual
//! problem*, which trades the p-th power objective for its quadratically
//! smoothed surrogate (see [`gamma`]). Residual problems are binned by a
//! power-of-two search over their optimum ([`scaling`]) and each bin is solved
//! by a multiplicative-weights loop with width reduction ([`mwu`]) whose inner
//! kernel is a weighted least-squares solve ([`quad`]). Linear systems can be
//! answered either by fresh factorizations or by a lazily maintained inverse
//! with bucketed low-rank updates ([`invmaint`]). For `1 < p < 2` the driver
//! works on the dual `q`-norm problem and recovers the primal from the
//! gradient ([`refine::solve_pnorm_dual`]).
//!
//! Entry points: [`refine::solve_pnorm`], [`graph::solve_pnorm_flow`],
//! [`graph::solve_lipschitz_labels`].

pub mod error;
pub mod gamma;
pub mod gen;
pub mod graph;
pub mod invmaint;
pub mod lin;
pub mod mwu;
pub mod quad;
pub mod refine;
pub mod scaling;

pub use error::{Result, SolverError};
pub use gamma::{GammaParams, SmoothingVector};
// Re-exports of the solver entry types live at the crate root once the
// corresponding modules land.
