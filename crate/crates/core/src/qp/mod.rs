//! Small convex-program solver shared by the scheduling and control layers.
//!
//! Problem class: convex quadratic cost over linear equalities/inequalities,
//! variable boxes and two-variable disks (apparent-power ratings).  Single
//! deterministic code path — no randomness, no threads — so repeated solves
//! of one problem are bit-identical.

mod enumerate;
mod kkt;
mod problem;
mod project;
mod solve;

pub use enumerate::{enumerate_optimum, OracleOptions, OracleSolution};
pub use kkt::{kkt_residual, KktResiduals};
pub use problem::{ConvexProblem, DiskConstraint, LinearRows};
pub use project::{project_box, project_disk};
pub use solve::{solve, DualVariables, SolveOptions, SolverSolution, SolverStatus};

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem data: {0}")]
    InvalidData(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
}

/// Maximum that propagates NaN instead of discarding it (`f64::max` returns
/// the other operand when one is NaN).  Every residual and violation that
/// gates solver acceptance folds with this, so a corrupted iterate can never
/// report a small residual.
#[inline]
pub(crate) fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}
