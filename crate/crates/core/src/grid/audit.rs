//! Constraint audit: margins of an injection state against voltage bands and
//! line ampacities, evaluated either through an affine grid model or through
//! the AC oracle.

use super::network::NetworkModel;
use super::powerflow::{solve_power_flow, InjectionVector, PowerFlowOptions};
use super::sensitivity::LinearGridModel;
use super::GridError;

#[derive(Debug, Clone)]
pub struct GridLimits {
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    /// Per line, per-unit current.
    pub i_max_pu: Vec<f64>,
}

impl GridLimits {
    /// Default band with ampacities taken from the line data.
    pub fn from_network(model: &NetworkModel, v_min_pu: f64, v_max_pu: f64) -> Self {
        GridLimits {
            v_min_pu,
            v_max_pu,
            i_max_pu: model.ampacity_pu(),
        }
    }

    /// Controller-side envelope: the voltage band shrunk by an absolute
    /// margin and ampacities derated by a fraction, so that scheduling
    /// against the affine model leaves headroom for its truncation error.
    pub fn tightened(&self, v_margin_pu: f64, i_margin_frac: f64) -> Self {
        GridLimits {
            v_min_pu: self.v_min_pu + v_margin_pu,
            v_max_pu: self.v_max_pu - v_margin_pu,
            i_max_pu: self
                .i_max_pu
                .iter()
                .map(|&a| a * (1.0 - i_margin_frac))
                .collect(),
        }
    }
}

pub enum AuditMode<'a> {
    /// Evaluate the affine model (what the controllers enforce).
    Linearized(&'a LinearGridModel),
    /// Re-solve the AC equations (ground truth).
    Exact(&'a NetworkModel),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuditViolation {
    VoltageLow { bus_pos: usize, v_pu: f64 },
    VoltageHigh { bus_pos: usize, v_pu: f64 },
    Ampacity { line: usize, i_pu: f64, limit_pu: f64 },
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    /// min over buses of (v − v_min); negative means violation.
    pub v_low_margin_pu: f64,
    /// min over buses of (v_max − v).
    pub v_high_margin_pu: f64,
    /// min over lines of (i_max − i).
    pub ampacity_margin_pu: f64,
    pub violations: Vec<AuditViolation>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn audit_constraints(
    mode: AuditMode,
    inj: &InjectionVector,
    limits: &GridLimits,
) -> Result<AuditReport, GridError> {
    let (v, i): (Vec<f64>, Vec<f64>) = match mode {
        AuditMode::Linearized(lgm) => {
            let pred = lgm.predict_state(inj)?;
            (pred.v_pu, pred.i_pu)
        }
        AuditMode::Exact(model) => {
            let sol = solve_power_flow(model, inj, &PowerFlowOptions::default())?;
            (sol.v_pu, sol.i_pu)
        }
    };
    if i.len() != limits.i_max_pu.len() {
        return Err(GridError::Dimension(format!(
            "{} lines in state vs {} ampacity limits",
            i.len(),
            limits.i_max_pu.len()
        )));
    }
    let mut report = AuditReport {
        v_low_margin_pu: f64::INFINITY,
        v_high_margin_pu: f64::INFINITY,
        ampacity_margin_pu: f64::INFINITY,
        violations: Vec::new(),
    };
    for (pos, &vb) in v.iter().enumerate() {
        report.v_low_margin_pu = report.v_low_margin_pu.min(vb - limits.v_min_pu);
        report.v_high_margin_pu = report.v_high_margin_pu.min(limits.v_max_pu - vb);
        if vb < limits.v_min_pu {
            report.violations.push(AuditViolation::VoltageLow {
                bus_pos: pos,
                v_pu: vb,
            });
        }
        if vb > limits.v_max_pu {
            report.violations.push(AuditViolation::VoltageHigh {
                bus_pos: pos,
                v_pu: vb,
            });
        }
    }
    for (l, (&cur, &lim)) in i.iter().zip(&limits.i_max_pu).enumerate() {
        report.ampacity_margin_pu = report.ampacity_margin_pu.min(lim - cur);
        if cur > lim {
            report.violations.push(AuditViolation::Ampacity {
                line: l,
                i_pu: cur,
                limit_pu: lim,
            });
        }
    }
    Ok(report)
}
