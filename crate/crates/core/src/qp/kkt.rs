//! First-order optimality residuals for a primal/dual candidate pair.  Pure
//! evaluation: used by the solver's postcondition and directly by tests.

use super::nan_max;
use super::problem::ConvexProblem;
use super::solve::DualVariables;

#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    /// ‖∇f(x) + Σ yᵢ ∇gᵢ(x)‖∞
    pub stationarity: f64,
    /// Largest constraint violation.
    pub primal: f64,
    /// Largest |multiplier × slack| over inequality-type constraints.
    pub complementarity: f64,
}

impl KktResiduals {
    /// NaN-propagating, so a residual computed from a corrupted candidate can
    /// never compare as small.
    pub fn max(&self) -> f64 {
        nan_max(nan_max(self.stationarity, self.primal), self.complementarity)
    }
}

pub fn kkt_residual(p: &ConvexProblem, x: &[f64], duals: &DualVariables) -> KktResiduals {
    let n = p.num_vars();
    let mut grad = vec![0.0; n];
    grad.copy_from_slice(p.linear());
    for &(i, j, v) in p.quad_entries() {
        if i == j {
            grad[i] += v * x[i];
        } else {
            grad[i] += v * x[j];
            grad[j] += v * x[i];
        }
    }
    for r in 0..p.eq_rows().len() {
        let y = duals.eq.get(r).copied().unwrap_or(0.0);
        if y != 0.0 {
            let (cols, vals) = p.eq_rows().row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                grad[c] += y * v;
            }
        }
    }
    let mut complementarity = 0.0f64;
    for r in 0..p.ineq_rows().len() {
        let y = duals.ineq.get(r).copied().unwrap_or(0.0);
        let slack = p.ineq_rows().rhs(r) - p.ineq_rows().dot(r, x);
        complementarity = nan_max(complementarity, (y * slack).abs());
        if y != 0.0 {
            let (cols, vals) = p.ineq_rows().row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                grad[c] += y * v;
            }
        }
    }
    for i in 0..n {
        let y = duals.bounds.get(i).copied().unwrap_or(0.0);
        grad[i] += y;
        if y > 0.0 && p.upper()[i].is_finite() {
            complementarity = nan_max(complementarity, (y * (p.upper()[i] - x[i])).abs());
        } else if y < 0.0 && p.lower()[i].is_finite() {
            complementarity = nan_max(complementarity, (y * (x[i] - p.lower()[i])).abs());
        }
    }
    for (k, d) in p.disks().iter().enumerate() {
        let y = duals.disks.get(k).copied().unwrap_or([0.0; 2]);
        grad[d.i] += y[0];
        grad[d.j] += y[1];
        let slack = d.radius - x[d.i].hypot(x[d.j]);
        let lam = y[0].hypot(y[1]);
        complementarity = nan_max(complementarity, (lam * slack).abs());
    }
    KktResiduals {
        stationarity: grad.iter().fold(0.0f64, |m, v| nan_max(m, v.abs())),
        primal: nan_max(p.max_violation(x), 0.0),
        complementarity,
    }
}
