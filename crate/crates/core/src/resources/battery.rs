//! Battery storage: parameters, state-of-energy dynamics, and the convex
//! building blocks used by both the scheduler and the real-time controller.
//!
//! Sign convention: positive active power is discharge (injection into the
//! grid), so the state of energy decreases when `p` is positive.

use super::ResourceError;
use crate::qp::ConvexProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryParams {
    pub bus: u32,
    /// Energy capacity (kWh).
    pub capacity_kwh: f64,
    /// Apparent-power rating (kVA): the (p, q) setpoint lives in this disk.
    pub s_max_kva: f64,
    /// Back-off fraction `a`: usable SOE is [a·E, (1−a)·E].
    pub backoff: f64,
    /// Sampling time (s) of one control interval.
    pub t_s_s: f64,
    /// Charging efficiency; 1 keeps the dynamics symmetric.
    pub efficiency: f64,
}

impl BatteryParams {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if !(self.capacity_kwh > 0.0) {
            return Err(ResourceError::InvalidParams(format!(
                "battery capacity must be positive, got {}",
                self.capacity_kwh
            )));
        }
        if !(self.s_max_kva > 0.0) {
            // An infinite rating is allowed and simply disables the disk.
            return Err(ResourceError::InvalidParams(format!(
                "battery rating must be positive, got {}",
                self.s_max_kva
            )));
        }
        if !(0.0..0.5).contains(&self.backoff) {
            return Err(ResourceError::InvalidParams(format!(
                "back-off fraction must be in [0, 0.5), got {}",
                self.backoff
            )));
        }
        if !(self.t_s_s > 0.0) {
            return Err(ResourceError::InvalidParams(format!(
                "sampling time must be positive, got {}",
                self.t_s_s
            )));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(ResourceError::InvalidParams(format!(
                "efficiency must be in (0, 1], got {}",
                self.efficiency
            )));
        }
        Ok(())
    }

    pub fn soe_min_kwh(&self) -> f64 {
        self.backoff * self.capacity_kwh
    }

    pub fn soe_max_kwh(&self) -> f64 {
        (1.0 - self.backoff) * self.capacity_kwh
    }

    /// kWh drained per kW of discharge over one interval.
    pub fn kwh_per_kw(&self) -> f64 {
        self.t_s_s / 3600.0
    }

    pub fn soe_in_bounds(&self, soe_kwh: f64) -> bool {
        (self.soe_min_kwh()..=self.soe_max_kwh()).contains(&soe_kwh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub soe_kwh: f64,
}

impl BatteryState {
    pub fn soc(&self, params: &BatteryParams) -> f64 {
        self.soe_kwh / params.capacity_kwh
    }
}

/// One interval of the SOE dynamics. Pure arithmetic: limit enforcement
/// belongs to the optimization problems and the audits.
///
/// With `efficiency < 1` only a fraction of the charging power is stored;
/// discharge drains at face value.
pub fn battery_soe_step(state: BatteryState, p_b_kw: f64, params: &BatteryParams) -> BatteryState {
    let k = params.kwh_per_kw();
    let effective = if p_b_kw < 0.0 {
        params.efficiency * p_b_kw
    } else {
        p_b_kw
    };
    BatteryState {
        soe_kwh: state.soe_kwh - effective * k,
    }
}

/// Variable layout of one battery inside a larger problem: per step the
/// active power, reactive power, and the SOE carried as an explicit state.
///
/// The SOE variables are held in kW-equivalent units — SOE divided by
/// `params.kwh_per_kw()` — so the recurrence rows have unit coefficients and
/// the problem is well scaled; multiply by `kwh_per_kw()` to read kWh.
#[derive(Debug, Clone)]
pub struct BatteryVars {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    pub soe: Vec<usize>,
}

impl BatteryVars {
    /// Time-major contiguous layout `[p_t, q_t, soe_t]` starting at `start`;
    /// keeps the problem bandwidth at 3 regardless of the horizon.
    pub fn contiguous(start: usize, horizon: usize) -> Self {
        let p = (0..horizon).map(|t| start + 3 * t).collect();
        let q = (0..horizon).map(|t| start + 3 * t + 1).collect();
        let soe = (0..horizon).map(|t| start + 3 * t + 2).collect();
        BatteryVars { p, q, soe }
    }

    pub fn horizon(&self) -> usize {
        self.p.len()
    }

    pub fn len(&self) -> usize {
        3 * self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Scheduler-side building blocks: quadratic discharge/charge cost and the
/// feasible set (SOE recurrence, SOE band, rating disk) over a horizon.
#[derive(Debug, Clone)]
pub struct BatteryDayAheadBlocks<'a> {
    params: &'a BatteryParams,
    initial_soe_kwh: f64,
    horizon: usize,
}

pub fn battery_dayahead_blocks(
    params: &BatteryParams,
    initial_soe_kwh: f64,
    horizon: usize,
) -> Result<BatteryDayAheadBlocks<'_>, ResourceError> {
    params.validate()?;
    if horizon == 0 {
        return Err(ResourceError::Dimension(
            "battery blocks need a horizon of at least 1 step".into(),
        ));
    }
    if !params.soe_in_bounds(initial_soe_kwh) {
        return Err(ResourceError::StateOutOfBounds {
            soe_kwh: initial_soe_kwh,
            lo_kwh: params.soe_min_kwh(),
            hi_kwh: params.soe_max_kwh(),
        });
    }
    Ok(BatteryDayAheadBlocks {
        params,
        initial_soe_kwh,
        horizon,
    })
}

impl BatteryDayAheadBlocks<'_> {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Adds `weight · Σ_t (p_t² + q_t²)` to the cost: converter throughput is
    /// penalized on both axes, which also keeps the scheduling program
    /// strictly convex in every battery variable.
    pub fn add_cost(&self, prob: &mut ConvexProblem, vars: &BatteryVars, weight: f64) {
        assert_eq!(vars.horizon(), self.horizon, "variable layout horizon");
        for (&pi, &qi) in vars.p.iter().zip(&vars.q) {
            prob.add_quadratic(pi, pi, weight);
            prob.add_quadratic(qi, qi, weight);
        }
    }

    /// Adds the feasible set: per step the SOE recurrence
    /// `soe_t = soe_{t−1} − k·p_t`, the usable-SOE band, and the rating disk
    /// on (p, q). The optimization dynamics are the symmetric (efficiency-1)
    /// recurrence; an efficiency below 1 only affects the simulated plant.
    ///
    /// SOE variables are in kW-equivalent units (see [`BatteryVars`]), which
    /// turns the recurrence into `soe_t − soe_{t−1} + p_t = 0` with unit
    /// coefficients.
    pub fn add_constraints(&self, prob: &mut ConvexProblem, vars: &BatteryVars) {
        assert_eq!(vars.horizon(), self.horizon, "variable layout horizon");
        let k = self.params.kwh_per_kw();
        let (lo, hi) = (self.params.soe_min_kwh() / k, self.params.soe_max_kwh() / k);
        for t in 0..self.horizon {
            if t == 0 {
                prob.push_eq(
                    &[(vars.soe[0], 1.0), (vars.p[0], 1.0)],
                    self.initial_soe_kwh / k,
                );
            } else {
                prob.push_eq(
                    &[(vars.soe[t], 1.0), (vars.soe[t - 1], -1.0), (vars.p[t], 1.0)],
                    0.0,
                );
            }
            prob.set_bounds(vars.soe[t], lo, hi);
            if self.params.s_max_kva.is_finite() {
                prob.add_disk(vars.p[t], vars.q[t], self.params.s_max_kva);
            }
        }
    }
}

/// Real-time local problem: the battery's intrinsic cost is constant, so the
/// proximal update reduces to the Euclidean projection of the target
/// trajectory onto the feasible set.
///
/// `target` is one (p, q) pair per horizon step, `rho` the proximal weight.
/// Returns the problem plus the variable layout for reading the solution.
pub fn battery_rt_problem(
    params: &BatteryParams,
    state: BatteryState,
    target: &[[f64; 2]],
    rho: f64,
) -> Result<(ConvexProblem, BatteryVars), ResourceError> {
    if !(rho > 0.0) {
        return Err(ResourceError::InvalidParams(format!(
            "proximal weight must be positive, got {rho}"
        )));
    }
    let horizon = target.len();
    let blocks = battery_dayahead_blocks(params, state.soe_kwh, horizon)?;
    let vars = BatteryVars::contiguous(0, horizon);
    let mut prob = ConvexProblem::new(vars.len());
    for (t, pair) in target.iter().enumerate() {
        prob.add_square(0.5 * rho, &[(vars.p[t], 1.0)], -pair[0]);
        prob.add_square(0.5 * rho, &[(vars.q[t], 1.0)], -pair[1]);
    }
    blocks.add_constraints(&mut prob, &vars);
    Ok((prob, vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve, SolveOptions};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn params() -> BatteryParams {
        BatteryParams {
            bus: 5,
            capacity_kwh: 25.0,
            s_max_kva: 25.0,
            backoff: 0.1,
            t_s_s: 30.0,
            efficiency: 1.0,
        }
    }

    #[test]
    fn soe_step_discharge_arithmetic() {
        let s = battery_soe_step(BatteryState { soe_kwh: 18.75 }, 25.0, &params());
        assert_abs_diff_eq!(s.soe_kwh, 18.75 - 25.0 * 30.0 / 3600.0, epsilon = 1e-12);
        assert!((s.soe_kwh - 18.5417).abs() < 1e-4);
    }

    #[test]
    fn soe_step_zero_power_is_identity() {
        let s0 = BatteryState { soe_kwh: 12.0 };
        assert_eq!(battery_soe_step(s0, 0.0, &params()).soe_kwh, 12.0);
    }

    #[test]
    fn charge_then_discharge_restores_soe() {
        let p = params();
        let s1 = battery_soe_step(BatteryState { soe_kwh: 12.0 }, -8.0, &p);
        let s2 = battery_soe_step(s1, 8.0, &p);
        assert_abs_diff_eq!(s2.soe_kwh, 12.0, epsilon = 1e-12);
    }

    #[test]
    fn charging_efficiency_stores_less() {
        let mut p = params();
        p.efficiency = 0.9;
        let charged = battery_soe_step(BatteryState { soe_kwh: 12.0 }, -10.0, &p);
        assert_abs_diff_eq!(
            charged.soe_kwh,
            12.0 + 0.9 * 10.0 * 30.0 / 3600.0,
            epsilon = 1e-12
        );
        // Discharge drains at face value.
        let drained = battery_soe_step(BatteryState { soe_kwh: 12.0 }, 10.0, &p);
        assert_abs_diff_eq!(
            drained.soe_kwh,
            12.0 - 10.0 * 30.0 / 3600.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn telescoped_dynamics_match_constraint_rows() {
        // Folding the per-step dynamics over an arbitrary trajectory must
        // satisfy the scheduler's recurrence rows exactly.
        let p = params();
        let traj = [4.0, -7.5, 0.25, 19.0, -2.0];
        let blocks = battery_dayahead_blocks(&p, 15.0, traj.len()).unwrap();
        let vars = BatteryVars::contiguous(0, traj.len());
        let mut prob = ConvexProblem::new(vars.len());
        blocks.add_constraints(&mut prob, &vars);

        let mut x = vec![0.0; vars.len()];
        let mut state = BatteryState { soe_kwh: 15.0 };
        for (t, &pb) in traj.iter().enumerate() {
            state = battery_soe_step(state, pb, &p);
            x[vars.p[t]] = pb;
            x[vars.soe[t]] = state.soe_kwh / p.kwh_per_kw();
        }
        for r in 0..prob.eq_rows().len() {
            assert_abs_diff_eq!(prob.eq_rows().dot(r, &x), prob.eq_rows().rhs(r), epsilon = 1e-12);
        }
    }

    #[test]
    fn three_step_fragment_matches_hand_enumeration() {
        let p = params();
        let blocks = battery_dayahead_blocks(&p, 18.75, 3).unwrap();
        let vars = BatteryVars::contiguous(0, 3);
        let mut prob = ConvexProblem::new(vars.len());
        blocks.add_cost(&mut prob, &vars, 2.5);
        blocks.add_constraints(&mut prob, &vars);

        // SOE carried in kW-equivalent units: divide kWh by k = 30 s / 3600.
        let k = 30.0 / 3600.0;
        // Equalities: soe_0 + p_0 = 18.75/k; soe_t − soe_{t−1} + p_t = 0.
        assert_eq!(prob.eq_rows().len(), 3);
        let (c0, v0) = prob.eq_rows().row(0);
        assert_eq!(c0, &[vars.soe[0], vars.p[0]]);
        assert_abs_diff_eq!(v0[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(prob.eq_rows().rhs(0), 18.75 / k, epsilon = 1e-12);
        for t in 1..3 {
            let (c, v) = prob.eq_rows().row(t);
            assert_eq!(c, &[vars.soe[t], vars.soe[t - 1], vars.p[t]]);
            assert_eq!(v[0], 1.0);
            assert_eq!(v[1], -1.0);
            assert_eq!(v[2], 1.0);
            assert_eq!(prob.eq_rows().rhs(t), 0.0);
        }
        // SOE band boxes and rating disks per step; p and q unbounded boxes.
        for t in 0..3 {
            assert_abs_diff_eq!(prob.lower()[vars.soe[t]], 2.5 / k, epsilon = 1e-10);
            assert_abs_diff_eq!(prob.upper()[vars.soe[t]], 22.5 / k, epsilon = 1e-10);
            assert_eq!(prob.lower()[vars.p[t]], f64::NEG_INFINITY);
            assert_eq!(prob.upper()[vars.q[t]], f64::INFINITY);
        }
        assert_eq!(prob.disks().len(), 3);
        for (t, d) in prob.disks().iter().enumerate() {
            assert_eq!((d.i, d.j, d.radius), (vars.p[t], vars.q[t], 25.0));
        }
        assert_eq!(prob.ineq_rows().len(), 0);
        // Cost 2.5·Σ(p²+q²): objective at p = (1,1,1), q = 0 equals 7.5.
        let mut x = vec![0.0; 9];
        for t in 0..3 {
            x[vars.p[t]] = 1.0;
        }
        assert_abs_diff_eq!(prob.objective(&x), 7.5, epsilon = 1e-12);
    }

    #[test]
    fn rt_projection_identity_for_feasible_target() {
        let p = params();
        let target = [[5.0, 2.0], [-4.0, 1.0], [0.5, 0.0]];
        let (prob, vars) =
            battery_rt_problem(&p, BatteryState { soe_kwh: 12.5 }, &target, 2.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        for (t, pair) in target.iter().enumerate() {
            assert_abs_diff_eq!(sol.x[vars.p[t]], pair[0], epsilon = 1e-6);
            assert_abs_diff_eq!(sol.x[vars.q[t]], pair[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn rt_clips_to_rating_disk() {
        let p = params();
        let (prob, vars) =
            battery_rt_problem(&p, BatteryState { soe_kwh: 12.5 }, &[[30.0, 0.0]], 1.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[vars.p[0]], 25.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[vars.q[0]], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn rt_clips_to_soe_headroom() {
        // Barely above the lower SOE bound: feasible discharge is limited by
        // the energy left, not by the rating.
        let p = params();
        let head = 0.05; // kWh above the floor
        let state = BatteryState {
            soe_kwh: p.soe_min_kwh() + head,
        };
        let (prob, vars) = battery_rt_problem(&p, state, &[[30.0, 0.0]], 1.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[vars.p[0]], head / p.kwh_per_kw(), epsilon = 1e-6);
    }

    #[test]
    fn rt_full_battery_rejects_charging() {
        let p = params();
        let state = BatteryState {
            soe_kwh: p.soe_max_kwh(),
        };
        let (prob, vars) = battery_rt_problem(&p, state, &[[-10.0, 0.0]], 1.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[vars.p[0]], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn collapsing_soe_band_pins_power_to_zero() {
        let mut p = params();
        p.backoff = 0.499_99;
        let mid = 0.5 * p.capacity_kwh;
        let (prob, vars) =
            battery_rt_problem(&p, BatteryState { soe_kwh: mid }, &[[10.0, 0.0]], 1.0).unwrap();
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        assert!(sol.x[vars.p[0]].abs() < 0.05, "p = {}", sol.x[vars.p[0]]);
    }

    #[test]
    fn rt_solution_is_euclidean_projection() {
        // Variational characterization: for the projection x* of the target
        // onto the feasible set, ⟨target − x*, y − x*⟩ ≤ 0 for all feasible y.
        use rand::Rng;
        let p = params();
        let state = BatteryState { soe_kwh: 20.0 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let opts = SolveOptions::default();
        for _ in 0..15 {
            let target: Vec<[f64; 2]> = (0..4)
                .map(|_| [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)])
                .collect();
            let (prob, vars) = battery_rt_problem(&p, state, &target, 1.0).unwrap();
            let sol = solve(&prob, &opts).unwrap();
            // A handful of feasible witnesses from other projections.
            for _ in 0..5 {
                let witness_target: Vec<[f64; 2]> = (0..4)
                    .map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)])
                    .collect();
                let (wp, wv) = battery_rt_problem(&p, state, &witness_target, 1.0).unwrap();
                let w = solve(&wp, &opts).unwrap();
                let mut inner = 0.0;
                for t in 0..4 {
                    inner += (target[t][0] - sol.x[vars.p[t]]) * (w.x[wv.p[t]] - sol.x[vars.p[t]]);
                    inner += (target[t][1] - sol.x[vars.q[t]]) * (w.x[wv.q[t]] - sol.x[vars.q[t]]);
                }
                assert!(inner <= 1e-5, "projection inequality violated: {inner}");
            }
        }
    }

    #[test]
    fn rejects_initial_soe_outside_band() {
        let p = params();
        let err = battery_dayahead_blocks(&p, 1.0, 4).unwrap_err();
        assert!(matches!(err, ResourceError::StateOutOfBounds { .. }));
    }
}
