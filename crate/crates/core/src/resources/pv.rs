//! Photovoltaic plants: converter rating, weather-dependent potential, and
//! the convex building blocks for scheduling and real-time control.
//!
//! The intrinsic cost penalizes curtailment and reactive output:
//! `(p − p̂)² + q²`, keeping the plant at its potential and near unity power
//! factor whenever the coupling constraints allow it.

use super::ResourceError;
use crate::qp::ConvexProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct PvParams {
    pub bus: u32,
    /// Converter apparent-power rating (kVA).
    pub s_max_kva: f64,
    /// Whether the converter may produce reactive power; when false the
    /// q setpoint is pinned to zero.
    pub reactive_capable: bool,
}

impl PvParams {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if !(self.s_max_kva > 0.0) {
            return Err(ResourceError::InvalidParams(format!(
                "pv rating must be positive, got {}",
                self.s_max_kva
            )));
        }
        Ok(())
    }
}

/// Maximum-generation series (kW) over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PvPotential {
    pub p_hat_kw: Vec<f64>,
}

impl PvPotential {
    pub fn new(p_hat_kw: Vec<f64>) -> Result<Self, ResourceError> {
        if let Some(bad) = p_hat_kw.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ResourceError::InvalidParams(format!(
                "pv potential must be finite and non-negative, got {bad}"
            )));
        }
        Ok(PvPotential { p_hat_kw })
    }

    pub fn horizon(&self) -> usize {
        self.p_hat_kw.len()
    }
}

/// Variable layout of one plant inside a larger problem.
#[derive(Debug, Clone)]
pub struct PvVars {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

impl PvVars {
    /// Time-major contiguous layout `[p_t, q_t]` starting at `start`.
    pub fn contiguous(start: usize, horizon: usize) -> Self {
        PvVars {
            p: (0..horizon).map(|t| start + 2 * t).collect(),
            q: (0..horizon).map(|t| start + 2 * t + 1).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.p.len()
    }

    pub fn len(&self) -> usize {
        2 * self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Adds `weight · Σ_t [(p_t − p̂_t)² + q_t²]` to the cost.
pub fn pv_cost_block(
    prob: &mut ConvexProblem,
    vars: &PvVars,
    potential: &PvPotential,
    weight: f64,
) {
    assert_eq!(vars.horizon(), potential.horizon(), "layout vs potential");
    for t in 0..vars.horizon() {
        prob.add_square(weight, &[(vars.p[t], 1.0)], -potential.p_hat_kw[t]);
        prob.add_quadratic(vars.q[t], vars.q[t], weight);
    }
}

/// Adds the feasible set: `0 ≤ p_t ≤ p̂_t`, the rating disk on (p, q), and
/// `q_t = 0` when the converter cannot produce reactive power.
pub fn pv_constraint_block(
    prob: &mut ConvexProblem,
    vars: &PvVars,
    params: &PvParams,
    potential: &PvPotential,
) {
    assert_eq!(vars.horizon(), potential.horizon(), "layout vs potential");
    for t in 0..vars.horizon() {
        prob.set_bounds(vars.p[t], 0.0, potential.p_hat_kw[t]);
        if params.reactive_capable {
            prob.add_disk(vars.p[t], vars.q[t], params.s_max_kva);
        } else {
            prob.set_bounds(vars.q[t], 0.0, 0.0);
        }
    }
}

/// Real-time local problem: curtailment-plus-reactive cost with the proximal
/// pull towards the coordinator's target, over the plant's feasible set.
pub fn pv_rt_problem(
    params: &PvParams,
    potential: &PvPotential,
    target: &[[f64; 2]],
    rho: f64,
) -> Result<(ConvexProblem, PvVars), ResourceError> {
    params.validate()?;
    if !(rho > 0.0) {
        return Err(ResourceError::InvalidParams(format!(
            "proximal weight must be positive, got {rho}"
        )));
    }
    if target.len() != potential.horizon() {
        return Err(ResourceError::Dimension(format!(
            "target horizon {} vs potential horizon {}",
            target.len(),
            potential.horizon()
        )));
    }
    let vars = PvVars::contiguous(0, target.len());
    let mut prob = ConvexProblem::new(vars.len());
    pv_cost_block(&mut prob, &vars, potential, 1.0);
    for (t, pair) in target.iter().enumerate() {
        prob.add_square(0.5 * rho, &[(vars.p[t], 1.0)], -pair[0]);
        prob.add_square(0.5 * rho, &[(vars.q[t], 1.0)], -pair[1]);
    }
    pv_constraint_block(&mut prob, &vars, params, potential);
    Ok((prob, vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve, SolveOptions};
    use approx::assert_abs_diff_eq;

    fn plant(reactive: bool) -> PvParams {
        PvParams {
            bus: 9,
            s_max_kva: 13.0,
            reactive_capable: reactive,
        }
    }

    #[test]
    fn target_at_potential_is_not_curtailed() {
        let pot = PvPotential::new(vec![10.0]).unwrap();
        let (prob, vars) = pv_rt_problem(&plant(true), &pot, &[[10.0, 0.0]], 1e-6).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[vars.p[0]], 10.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[vars.q[0]], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn proximal_pull_balances_curtailment_cost() {
        // Interior optimum: minimize (p−10)² + (ρ/2)(p−6)² at ρ = 2 gives the
        // weighted average (2·10 + 2·6)/(2 + 2) = 8.
        let pot = PvPotential::new(vec![10.0]).unwrap();
        let (prob, vars) = pv_rt_problem(&plant(true), &pot, &[[6.0, 0.0]], 2.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[vars.p[0]], 8.0, epsilon = 1e-6);
    }

    #[test]
    fn reactive_incapable_plant_pins_q_to_zero() {
        let pot = PvPotential::new(vec![10.0]).unwrap();
        let (prob, vars) = pv_rt_problem(&plant(false), &pot, &[[10.0, 5.0]], 4.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[vars.q[0]], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn rating_disk_binds_when_potential_exceeds_it() {
        let mut params = plant(true);
        params.s_max_kva = 13.0;
        let pot = PvPotential::new(vec![20.0]).unwrap();
        let (prob, vars) = pv_rt_problem(&params, &pot, &[[20.0, 0.0]], 50.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[vars.p[0]], 13.0, epsilon = 1e-6);
    }

    #[test]
    fn solution_stays_in_potential_box_and_disk() {
        use rand::{Rng, SeedableRng};
        let params = plant(true);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let opts = SolveOptions::default();
        for _ in 0..20 {
            let pot = PvPotential::new(
                (0..3).map(|_| rng.gen_range(0.0..18.0)).collect(),
            )
            .unwrap();
            let target: Vec<[f64; 2]> = (0..3)
                .map(|_| [rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0)])
                .collect();
            let (prob, vars) = pv_rt_problem(&params, &pot, &target, 1.5).unwrap();
            let sol = solve(&prob, &opts).unwrap();
            for t in 0..3 {
                let p = sol.x[vars.p[t]];
                let q = sol.x[vars.q[t]];
                assert!(p >= -1e-8 && p <= pot.p_hat_kw[t] + 1e-8);
                assert!(p.hypot(q) <= params.s_max_kva + 1e-8);
                // Curtailment is never negative.
                assert!(pot.p_hat_kw[t] - p >= -1e-8);
            }
        }
    }

    #[test]
    fn rejects_negative_potential() {
        assert!(PvPotential::new(vec![3.0, -0.1]).is_err());
    }

    #[test]
    fn rejects_horizon_mismatch() {
        let pot = PvPotential::new(vec![1.0, 2.0]).unwrap();
        let err = pv_rt_problem(&plant(true), &pot, &[[1.0, 0.0]], 1.0).unwrap_err();
        assert!(matches!(err, ResourceError::Dimension(_)));
    }
}
