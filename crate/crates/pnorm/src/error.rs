//! Error type shared by all solver layers.

use std::fmt;

#[derive(Debug)]
pub enum SolverError {
    /// Malformed input: dimension mismatches, out-of-range exponents, bad files.
    InvalidInput(String),
    /// A linear system or subproblem has no solution consistent with its
    /// right-hand side (e.g. `b` outside the range of `A`).
    Infeasible(String),
    /// A factorization found the system numerically rank deficient in a way
    /// the caller cannot recover from.
    Singular(String),
    /// The multiplicative-weights loop exhausted its width-reduction budget;
    /// the parameter constants are too small for this instance.
    BudgetExceeded(String),
    /// A width-reduction step found no entry that is both wide and cheap.
    /// The analysis precludes this in the intended parameter regime, so we
    /// abort with diagnostics rather than loop forever.
    StalledWidthStep(String),
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverError::InvalidInput(s) => write!(f, "invalid input: {s}"),
            SolverError::Infeasible(s) => write!(f, "infeasible: {s}"),
            SolverError::Singular(s) => write!(f, "singular system: {s}"),
            SolverError::BudgetExceeded(s) => write!(f, "budget exceeded: {s}"),
            SolverError::StalledWidthStep(s) => write!(f, "stalled width-reduction step: {s}"),
        }
    }
}

impl std::error::Error for SolverError {}

pub type Result<T> = std::result::Result<T, SolverError>;
