//! Feeder model: network data with admittance matrix, an AC power-flow
//! oracle (Newton–Raphson, balanced single-phase equivalent, per-unit), and
//! the affine grid model obtained from power-flow sensitivity coefficients.
//!
//! Sign conventions used throughout the workspace:
//! * nodal powers are injections — generation positive, demand negative;
//! * the grid-connection-point (GCP) power is the net power the feeder
//!   delivers to the upper grid (export positive), so the AC balance reads
//!   `p_gcp = Σ injections − losses`;
//! * losses are reported positive.

pub(crate) mod affine;
mod audit;
mod network;
mod powerflow;
mod sensitivity;

pub use audit::{audit_constraints, AuditMode, AuditReport, AuditViolation, GridLimits};
pub use network::{Base, Bus, BusKind, Line, NetworkModel};
pub use powerflow::{solve_power_flow, InjectionVector, PowerFlowOptions, PowerFlowSolution};
pub use sensitivity::{compute_sensitivities, LinearGridModel, PredictedState};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("network file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid network structure: {0}")]
    Structure(String),
    #[error("power flow diverged after {iterations} iterations (mismatch {mismatch:.3e} pu)")]
    Divergence { iterations: usize, mismatch: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
