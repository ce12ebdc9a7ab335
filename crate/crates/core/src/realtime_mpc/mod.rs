//! Real-time tracking control: a receding-horizon controller that follows the
//! day-ahead dispatch plan with the actual fleet state, solvable either as
//! one centralized program or by consensus splitting between per-resource
//! agents and a grid aggregator.
//!
//! Centralized form, per horizon step — each resource's feasible set (SOE
//! recurrence and band, rating disks, curtailment boxes) plus its intrinsic
//! cost; the dispatch equality `p₀(x) = p̂_t` through the affine grid model
//! (losses included); the power-factor bound `|q₀(x)| ≤ tan θ_m · |p̂_t|`;
//! and optional voltage-band/ampacity rows.
//!
//! Consensus form — every resource keeps a private copy `x_r` of its (p, q)
//! trajectory, the aggregator holds the coupled copy `z_r`, and scaled duals
//! `u_r` reconcile them:
//! `x_r ← argmin f_r(x) + ρ/2‖x − z_r + u_r‖²` over the resource's set,
//! `z ← argmin Σ_r ρ/2‖z_r − x_r − u_r‖²` over the grid constraints,
//! `u_r ← u_r + x_r − z_r`.  The penalty ρ adapts to the residual balance,
//! rescaling `u` so the unscaled duals `y = ρu` are preserved.
//!
//! The tracking equality is hard by default; when it is infeasible against
//! the fleet's remaining flexibility, a per-step slack with a heavy quadratic
//! price is engaged and flagged, so depleted flexibility degrades gracefully
//! instead of aborting the control loop.

use std::collections::BTreeMap;

use crate::day_ahead::PfLimit;
use crate::grid::affine::{gcp_terms, limit_rows, ResourceCols};
use crate::grid::{GridError, GridLimits, InjectionVector, LinearGridModel, NetworkModel};
use crate::qp::{
    solve, ConvexProblem, SolveError, SolveOptions, SolverSolution, SolverStatus,
};
use crate::resources::{
    battery_dayahead_blocks, battery_rt_problem, pv_constraint_block, pv_cost_block,
    pv_rt_problem, BatteryState, BatteryVars, PvPotential, PvVars, Resource, ResourceKind,
    ResourceError, ResourceSet, ResourceSetpoint,
};

/// Quadratic price (per kW²) of the tracking slack when the dispatch
/// equality cannot be met: heavy enough that slack is used only as a last
/// resort, finite so the program stays well conditioned.
pub const SOFT_TRACKING_WEIGHT: f64 = 1e3;

/// Tiny quadratic regularizer on battery (p, q) in the tracking layer.  The
/// battery's intrinsic real-time cost is zero (its update is a projection),
/// which leaves flat directions — e.g. reactive power inside the cone — so
/// the centralized and consensus optima could differ on ties.  The same
/// regularizer on both paths makes the optimum unique and the two layers
/// comparable, while 1 µW²-scale weight never competes with tracking.
const BATTERY_RT_REG_KW2: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum RtError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error("inconsistent controller inputs: {0}")]
    Input(String),
    #[error(
        "subproblem `{which}` did not reach optimality: {status:?} after {iterations} \
         iterations (kkt residual {kkt_max:.3e})"
    )]
    NotOptimal {
        which: String,
        status: SolverStatus,
        iterations: usize,
        kkt_max: f64,
    },
}

// ---------------------------------------------------------------------------
// horizon and configuration

/// Prediction window of one control step: `len` steps starting at step
/// `start` of the day, truncated at the end of the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizon {
    pub start: usize,
    pub len: usize,
}

impl Horizon {
    /// Default window length: 60 steps (30 minutes at a 30 s period).
    pub const DEFAULT_LEN: usize = 60;

    pub fn new(start: usize, day_steps: usize, max_len: usize) -> Result<Self, RtError> {
        if max_len == 0 {
            return Err(RtError::Input("horizon length must be at least 1".into()));
        }
        if start >= day_steps {
            return Err(RtError::Input(format!(
                "control step {start} is outside a day of {day_steps} steps"
            )));
        }
        Ok(Horizon {
            start,
            len: max_len.min(day_steps - start),
        })
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Residual-balancing policy for the consensus penalty ρ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyPolicy {
    /// Imbalance ratio beyond which ρ is adjusted.
    pub mu: f64,
    pub tau_incr: f64,
    pub tau_decr: f64,
    pub rho_init: f64,
    pub rho_min: f64,
    pub rho_max: f64,
}

impl Default for PenaltyPolicy {
    fn default() -> Self {
        PenaltyPolicy {
            mu: 10.0,
            tau_incr: 2.0,
            tau_decr: 2.0,
            rho_init: 1.0,
            rho_min: 1e-4,
            rho_max: 1e4,
        }
    }
}

impl PenaltyPolicy {
    fn validate(&self) -> Result<(), RtError> {
        if !(self.mu >= 1.0 && self.tau_incr >= 1.0 && self.tau_decr >= 1.0) {
            return Err(RtError::Input(format!(
                "penalty policy needs mu, tau ≥ 1, got mu {} tau ({}, {})",
                self.mu, self.tau_incr, self.tau_decr
            )));
        }
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho_init && self.rho_init <= self.rho_max)
        {
            return Err(RtError::Input(format!(
                "penalty bounds must satisfy 0 < rho_min ≤ rho_init ≤ rho_max, got \
                 ({}, {}, {})",
                self.rho_min, self.rho_init, self.rho_max
            )));
        }
        Ok(())
    }

    /// One balancing step: grow ρ when the primal residual dominates by more
    /// than `mu`, shrink it when the dual residual does, clamped to the
    /// configured range.
    pub fn adapt(&self, rho: f64, primal: f64, dual: f64) -> f64 {
        if primal > self.mu * dual {
            (rho * self.tau_incr).min(self.rho_max)
        } else if dual > self.mu * primal {
            (rho / self.tau_decr).max(self.rho_min)
        } else {
            rho
        }
    }
}

/// Stopping rule of the consensus iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmTolerances {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iterations: usize,
}

impl Default for AdmmTolerances {
    fn default() -> Self {
        AdmmTolerances {
            eps_abs: 1e-4,
            eps_rel: 1e-3,
            max_iterations: 50,
        }
    }
}

impl AdmmTolerances {
    fn validate(&self) -> Result<(), RtError> {
        if !(self.eps_abs > 0.0 && self.eps_rel >= 0.0) {
            return Err(RtError::Input(format!(
                "tolerances must satisfy eps_abs > 0, eps_rel ≥ 0, got ({}, {})",
                self.eps_abs, self.eps_rel
            )));
        }
        if self.max_iterations == 0 {
            return Err(RtError::Input("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// consensus state

/// One resource's (p, q) trajectory over the horizon, in kW / kVAr.
pub type Trajectory = Vec<[f64; 2]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub primal: f64,
    pub dual: f64,
    pub rho: f64,
}

/// Consensus iterate: per resource the private copy `x`, the aggregator copy
/// `z` and the scaled dual `u = y/ρ`, plus the penalty and the residual
/// history of the latest run.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub x: Vec<Trajectory>,
    pub z: Vec<Trajectory>,
    pub u: Vec<Trajectory>,
    pub rho: f64,
    pub history: Vec<ResidualSample>,
}

impl AdmmState {
    pub fn cold(num_resources: usize, horizon: usize, rho: f64) -> Self {
        let zeros = vec![vec![[0.0; 2]; horizon]; num_resources];
        AdmmState {
            x: zeros.clone(),
            z: zeros.clone(),
            u: zeros,
            rho,
            history: Vec::new(),
        }
    }

    /// Warm start for the next control step: every trajectory is shifted one
    /// step forward, the final entry is repeated to fill the tail, and the
    /// result is cut to `new_len` (shorter near the end of the day).
    pub fn shifted_for_next_step(&self, new_len: usize) -> AdmmState {
        let shift = |tr: &Trajectory| -> Trajectory {
            let last = tr.last().copied().unwrap_or([0.0; 2]);
            (0..new_len)
                .map(|i| tr.get(i + 1).copied().unwrap_or(last))
                .collect()
        };
        AdmmState {
            x: self.x.iter().map(shift).collect(),
            z: self.z.iter().map(shift).collect(),
            u: self.u.iter().map(shift).collect(),
            rho: self.rho,
            history: Vec::new(),
        }
    }

    /// Applies one penalty update, rescaling the stored duals so the
    /// unscaled multipliers `y = ρu` are unchanged.
    pub fn adapt_penalty(&mut self, policy: &PenaltyPolicy, primal: f64, dual: f64) {
        let new_rho = policy.adapt(self.rho, primal, dual);
        if new_rho != self.rho {
            let factor = self.rho / new_rho;
            for tr in &mut self.u {
                for pair in tr.iter_mut() {
                    pair[0] *= factor;
                    pair[1] *= factor;
                }
            }
            self.rho = new_rho;
        }
    }
}

/// Convergence summary of one consensus run.  When the iteration limit was
/// hit the norms describe the best iterate found (the one the setpoints are
/// taken from), not the final one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub converged: bool,
    pub primal_norm: f64,
    pub dual_norm: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    /// True when the dispatch equality had to be softened.
    pub soft_tracking: bool,
    /// Largest tracking slack engaged over the horizon (kW); 0 in hard mode.
    pub tracking_gap_kw: f64,
}

// ---------------------------------------------------------------------------
// per-control-step context

/// Everything one control step needs, with all series already sliced to the
/// horizon.  The sensitivity model is refreshed from the latest measured
/// grid state once per control step and serves the whole window.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub network: &'a NetworkModel,
    pub resources: &'a ResourceSet,
    pub lin: &'a LinearGridModel,
    /// Operational envelope; `None` drops voltage/ampacity rows.
    pub limits: Option<&'a GridLimits>,
    /// Only the power-factor bound is used here (the split penalty `nu`
    /// belongs to the scheduling layer).
    pub pf: PfLimit,
    /// Dispatch plan to track (GCP export-positive, kW), one per step.
    pub plan_p_kw: &'a [f64],
    /// Forecast uncontrollable (demand) injections, one per step.
    pub demand: &'a [InjectionVector],
    /// Measured state of energy per battery name (kWh).
    pub soe_kwh: &'a BTreeMap<String, f64>,
    /// Forecast generation potential per PV name (kW), one series per plant.
    pub pv_potential_kw: &'a BTreeMap<String, Vec<f64>>,
}

impl StepContext<'_> {
    pub fn horizon(&self) -> usize {
        self.plan_p_kw.len()
    }

    fn validate(&self) -> Result<usize, RtError> {
        let h = self.plan_p_kw.len();
        if h == 0 {
            return Err(RtError::Input("empty control horizon".into()));
        }
        if let Some(bad) = self.plan_p_kw.iter().find(|v| !v.is_finite()) {
            return Err(RtError::Input(format!("non-finite plan value {bad}")));
        }
        if self.demand.len() != h {
            return Err(RtError::Input(format!(
                "{} demand injections for a horizon of {h} steps",
                self.demand.len()
            )));
        }
        let m = self.network.non_slack().len();
        if self.demand.iter().any(|inj| inj.p_pu.len() != m) {
            return Err(RtError::Input(
                "demand injection width does not match the network".into(),
            ));
        }
        if self.resources.is_empty() {
            return Err(RtError::Input(
                "tracking control needs at least one controllable resource".into(),
            ));
        }
        if !(self.pf.cos_theta_min > 0.0 && self.pf.cos_theta_min <= 1.0) {
            return Err(RtError::Input(format!(
                "cos_theta_min must be in (0, 1], got {}",
                self.pf.cos_theta_min
            )));
        }
        for r in &self.resources.resources {
            if self.network.injection_index(r.bus()).is_none() {
                return Err(RtError::Input(format!(
                    "resource {} sits on bus {} which is not a non-slack bus",
                    r.name,
                    r.bus()
                )));
            }
            match &r.kind {
                ResourceKind::Battery { .. } => {
                    if !self.soe_kwh.contains_key(&r.name) {
                        return Err(RtError::Input(format!(
                            "battery {} has no measured state of energy",
                            r.name
                        )));
                    }
                }
                ResourceKind::Pv(_) => {
                    let pot = self.pv_potential_kw.get(&r.name).ok_or_else(|| {
                        RtError::Input(format!("pv {} has no potential forecast", r.name))
                    })?;
                    if pot.len() != h {
                        return Err(RtError::Input(format!(
                            "pv {} potential has {} steps for a horizon of {h}",
                            r.name,
                            pot.len()
                        )));
                    }
                }
            }
        }
        if let Some(lim) = self.limits {
            if lim.i_max_pu.len() != self.network.num_lines() {
                return Err(RtError::Input(format!(
                    "{} ampacity limits for a network with {} lines",
                    lim.i_max_pu.len(),
                    self.network.num_lines()
                )));
            }
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// shared problem assembly

/// Time-major variable layout: per step each resource's (p, q) — plus the
/// SOE state for batteries when the resources' dynamics are included — and
/// optionally one tracking slack.
#[derive(Debug, Clone)]
struct RtLayout {
    h: usize,
    offsets: Vec<usize>,
    step_width: usize,
    slack: Option<usize>,
}

impl RtLayout {
    fn new(resources: &ResourceSet, h: usize, with_soe: bool, soft: bool) -> Self {
        let mut offsets = Vec::with_capacity(resources.len());
        let mut w = 0usize;
        for r in &resources.resources {
            offsets.push(w);
            w += match &r.kind {
                ResourceKind::Battery { .. } if with_soe => 3,
                _ => 2,
            };
        }
        let slack = soft.then_some(w);
        if soft {
            w += 1;
        }
        RtLayout {
            h,
            offsets,
            step_width: w,
            slack,
        }
    }

    fn num_vars(&self) -> usize {
        self.h * self.step_width
    }

    fn pq_of(&self, t: usize, r: usize) -> (usize, usize) {
        let base = t * self.step_width + self.offsets[r];
        (base, base + 1)
    }

    fn slack_of(&self, t: usize) -> Option<usize> {
        self.slack.map(|s| t * self.step_width + s)
    }

    fn battery_vars(&self, r: usize) -> BatteryVars {
        BatteryVars {
            p: (0..self.h).map(|t| self.pq_of(t, r).0).collect(),
            q: (0..self.h).map(|t| self.pq_of(t, r).1).collect(),
            soe: (0..self.h)
                .map(|t| t * self.step_width + self.offsets[r] + 2)
                .collect(),
        }
    }

    fn pv_vars(&self, r: usize) -> PvVars {
        PvVars {
            p: (0..self.h).map(|t| self.pq_of(t, r).0).collect(),
            q: (0..self.h).map(|t| self.pq_of(t, r).1).collect(),
        }
    }
}

/// Builds the grid-coupled tracking program.  With `with_resources` the
/// fleet's feasible sets and intrinsic costs are included (centralized
/// problem); without, only the coupling rows over free (p, q) copies remain
/// (aggregator problem).  `soft` swaps the hard dispatch equality for a
/// slack-priced one.
fn build_rt(
    ctx: &StepContext,
    with_resources: bool,
    soft: bool,
) -> Result<(ConvexProblem, RtLayout), RtError> {
    let h = ctx.validate()?;
    let net = ctx.network;
    let s_base_kw = net.base.s_base_va / 1e3;
    let m = net.non_slack().len();
    let cols: Vec<ResourceCols> = ctx
        .resources
        .resources
        .iter()
        .map(|r| {
            // Presence validated above.
            let k = net.injection_index(r.bus()).expect("validated");
            ResourceCols { p: k, q: m + k }
        })
        .collect();
    // Worst-case |(p, q)| per resource, for pruning grid rows that provably
    // cannot bind.  Sound for the aggregator too: its copies agree with the
    // rating-feasible resource copies at any consensus point.
    let reaches: Vec<[f64; 2]> = ctx
        .resources
        .resources
        .iter()
        .map(|r| match &r.kind {
            ResourceKind::Battery { params, .. } => [params.s_max_kva, params.s_max_kva],
            ResourceKind::Pv(p) => {
                let q = if p.reactive_capable { p.s_max_kva } else { 0.0 };
                [p.s_max_kva, q]
            }
        })
        .collect();

    let layout = RtLayout::new(ctx.resources, h, with_resources, soft);
    let mut prob = ConvexProblem::new(layout.num_vars());
    let tan = ctx.pf.tan_theta_m();

    if with_resources {
        for (r_idx, r) in ctx.resources.resources.iter().enumerate() {
            match &r.kind {
                ResourceKind::Battery { params, .. } => {
                    let soe = ctx.soe_kwh[&r.name];
                    let vars = layout.battery_vars(r_idx);
                    let blocks = battery_dayahead_blocks(params, soe, h)?;
                    blocks.add_constraints(&mut prob, &vars);
                    for t in 0..h {
                        prob.add_quadratic(vars.p[t], vars.p[t], BATTERY_RT_REG_KW2);
                        prob.add_quadratic(vars.q[t], vars.q[t], BATTERY_RT_REG_KW2);
                    }
                }
                ResourceKind::Pv(params) => {
                    let vars = layout.pv_vars(r_idx);
                    let potential = PvPotential::new(ctx.pv_potential_kw[&r.name].clone())?;
                    pv_cost_block(&mut prob, &vars, &potential, 1.0);
                    pv_constraint_block(&mut prob, &vars, params, &potential);
                }
            }
        }
    }

    let mut terms: Vec<(usize, f64)> = Vec::with_capacity(2 * ctx.resources.len() + 1);
    for t in 0..h {
        let g = gcp_terms(ctx.lin, &ctx.demand[t], &cols, s_base_kw);
        let p_hat = ctx.plan_p_kw[t];

        // Dispatch equality Σ_r dp_r·(p_r, q_r) (+ slack) = p̂ − const.
        terms.clear();
        for (r_idx, d) in g.dp.iter().enumerate() {
            let (vp, vq) = layout.pq_of(t, r_idx);
            terms.push((vp, d[0]));
            terms.push((vq, d[1]));
        }
        if let Some(s) = layout.slack_of(t) {
            terms.push((s, 1.0));
            prob.add_quadratic(s, s, SOFT_TRACKING_WEIGHT);
        }
        prob.push_eq(&terms, p_hat - g.const_p_kw);

        // Power-factor bound around the planned power: ±q₀(x) ≤ tan θ_m |p̂|.
        let q_cap = tan * p_hat.abs();
        for sign in [1.0, -1.0] {
            terms.clear();
            for (r_idx, d) in g.dq.iter().enumerate() {
                let (vp, vq) = layout.pq_of(t, r_idx);
                terms.push((vp, sign * d[0]));
                terms.push((vq, sign * d[1]));
            }
            prob.push_ineq(&terms, q_cap - sign * g.const_q_kw);
        }

        // Voltage-band and ampacity rows through the same affine model.
        if let Some(lim) = ctx.limits {
            let rows = limit_rows(ctx.lin, &ctx.demand[t], &cols, &reaches, lim, s_base_kw)
                .map_err(|msg| RtError::Input(format!("at horizon step {t}: {msg}")))?;
            for row in &rows.rows {
                terms.clear();
                for (r_idx, c) in row.coefs.iter().enumerate() {
                    let (vp, vq) = layout.pq_of(t, r_idx);
                    terms.push((vp, c[0]));
                    terms.push((vq, c[1]));
                }
                prob.push_ineq(&terms, row.rhs);
            }
        }
    }
    Ok((prob, layout))
}

fn require_optimal(which: &str, sol: &SolverSolution) -> Result<(), RtError> {
    if sol.status == SolverStatus::Optimal {
        Ok(())
    } else {
        Err(RtError::NotOptimal {
            which: which.into(),
            status: sol.status,
            iterations: sol.iterations,
            kkt_max: sol.kkt.max(),
        })
    }
}

// ---------------------------------------------------------------------------
// centralized reference controller

/// Centralized tracking result over one horizon.
#[derive(Debug, Clone)]
pub struct RtSolution {
    /// First-step actuation per resource name.
    pub setpoints: BTreeMap<String, ResourceSetpoint>,
    /// Full (p, q) trajectories in fleet order.
    pub trajectories: Vec<Trajectory>,
    pub objective: f64,
    pub iterations: usize,
    pub soft_tracking: bool,
    pub tracking_gap_kw: f64,
}

/// Solves the whole-horizon tracking program in one piece.  When the hard
/// dispatch equality is unsolvable against the fleet's flexibility, the
/// slack-priced variant is solved instead and flagged.
pub fn solve_centralized(ctx: &StepContext, inner: &SolveOptions) -> Result<RtSolution, RtError> {
    let (prob, layout) = build_rt(ctx, true, false)?;
    let first = solve(&prob, inner)?;
    let (sol, layout, soft) = if first.status == SolverStatus::Optimal {
        (first, layout, false)
    } else {
        let (prob2, layout2) = build_rt(ctx, true, true)?;
        let second = solve(&prob2, inner)?;
        require_optimal("soft tracking", &second)?;
        (second, layout2, true)
    };

    let h = layout.h;
    let trajectories: Vec<Trajectory> = (0..ctx.resources.len())
        .map(|r| {
            (0..h)
                .map(|t| {
                    let (vp, vq) = layout.pq_of(t, r);
                    [sol.x[vp], sol.x[vq]]
                })
                .collect()
        })
        .collect();
    let setpoints = ctx
        .resources
        .resources
        .iter()
        .zip(&trajectories)
        .map(|(r, tr)| {
            (
                r.name.clone(),
                ResourceSetpoint {
                    p_kw: tr[0][0],
                    q_kvar: tr[0][1],
                },
            )
        })
        .collect();
    let tracking_gap_kw = (0..h)
        .filter_map(|t| layout.slack_of(t))
        .map(|s| sol.x[s].abs())
        .fold(0.0f64, f64::max);
    Ok(RtSolution {
        setpoints,
        trajectories,
        objective: sol.objective,
        iterations: sol.iterations,
        soft_tracking: soft,
        tracking_gap_kw,
    })
}

// ---------------------------------------------------------------------------
// consensus controller

/// The aggregator's half of the consensus split: the grid-coupling
/// constraints over free (p, q) copies, pre-assembled once per control step;
/// each call re-prices the proximal pull toward `x + u`.
pub struct AggregatorProblem {
    base: ConvexProblem,
    layout: RtLayout,
    num_resources: usize,
    soft: bool,
}

/// One aggregator solve: the coupled copies and the tracking slack engaged.
pub struct AggregatorStep {
    pub z: Vec<Trajectory>,
    pub tracking_gap_kw: f64,
}

impl AggregatorProblem {
    pub fn build(ctx: &StepContext, soft: bool) -> Result<Self, RtError> {
        let (base, layout) = build_rt(ctx, false, soft)?;
        Ok(AggregatorProblem {
            base,
            layout,
            num_resources: ctx.resources.len(),
            soft,
        })
    }

    pub fn soft(&self) -> bool {
        self.soft
    }

    /// Minimizes `Σ_r ρ/2‖z_r − target_r‖²` over the grid constraints, with
    /// `target = x + u`.
    pub fn solve(
        &self,
        targets: &[Trajectory],
        rho: f64,
        inner: &SolveOptions,
    ) -> Result<AggregatorStep, RtError> {
        if !(rho > 0.0) {
            return Err(RtError::Input(format!(
                "proximal weight must be positive, got {rho}"
            )));
        }
        if targets.len() != self.num_resources
            || targets.iter().any(|tr| tr.len() != self.layout.h)
        {
            return Err(RtError::Input(format!(
                "aggregator targets shaped {:?} do not match {} resources × {} steps",
                (targets.len(), targets.first().map_or(0, Vec::len)),
                self.num_resources,
                self.layout.h
            )));
        }
        let mut prob = self.base.clone();
        for (r, tr) in targets.iter().enumerate() {
            for (t, pair) in tr.iter().enumerate() {
                let (vp, vq) = self.layout.pq_of(t, r);
                prob.add_square(0.5 * rho, &[(vp, 1.0)], -pair[0]);
                prob.add_square(0.5 * rho, &[(vq, 1.0)], -pair[1]);
            }
        }
        let sol = solve(&prob, inner)?;
        require_optimal("aggregator", &sol)?;
        let z = (0..self.num_resources)
            .map(|r| {
                (0..self.layout.h)
                    .map(|t| {
                        let (vp, vq) = self.layout.pq_of(t, r);
                        [sol.x[vp], sol.x[vq]]
                    })
                    .collect()
            })
            .collect();
        let tracking_gap_kw = (0..self.layout.h)
            .filter_map(|t| self.layout.slack_of(t))
            .map(|s| sol.x[s].abs())
            .fold(0.0f64, f64::max);
        Ok(AggregatorStep { z, tracking_gap_kw })
    }
}

/// One resource's proximal update: its intrinsic cost plus `ρ/2‖x − target‖²`
/// over its feasible set, with `target = z − u`.  Each resource's update is
/// independent of the others', so callers may evaluate them in any order or
/// concurrently.
pub fn resource_update(
    res: &Resource,
    ctx: &StepContext,
    target: &[[f64; 2]],
    rho: f64,
    inner: &SolveOptions,
) -> Result<Trajectory, RtError> {
    match &res.kind {
        ResourceKind::Battery { params, .. } => {
            let soe = *ctx.soe_kwh.get(&res.name).ok_or_else(|| {
                RtError::Input(format!("battery {} has no measured state of energy", res.name))
            })?;
            let (mut prob, vars) =
                battery_rt_problem(params, BatteryState { soe_kwh: soe }, target, rho)?;
            for t in 0..target.len() {
                prob.add_quadratic(vars.p[t], vars.p[t], BATTERY_RT_REG_KW2);
                prob.add_quadratic(vars.q[t], vars.q[t], BATTERY_RT_REG_KW2);
            }
            let sol = solve(&prob, inner)?;
            require_optimal(&res.name, &sol)?;
            Ok((0..target.len())
                .map(|t| [sol.x[vars.p[t]], sol.x[vars.q[t]]])
                .collect())
        }
        ResourceKind::Pv(params) => {
            let pot = ctx.pv_potential_kw.get(&res.name).ok_or_else(|| {
                RtError::Input(format!("pv {} has no potential forecast", res.name))
            })?;
            let potential = PvPotential::new(pot.clone())?;
            let (prob, vars) = pv_rt_problem(params, &potential, target, rho)?;
            let sol = solve(&prob, inner)?;
            require_optimal(&res.name, &sol)?;
            Ok((0..target.len())
                .map(|t| [sol.x[vars.p[t]], sol.x[vars.q[t]]])
                .collect())
        }
    }
}

fn frob(trajs: &[Trajectory]) -> f64 {
    trajs
        .iter()
        .flat_map(|tr| tr.iter())
        .map(|p| p[0] * p[0] + p[1] * p[1])
        .sum::<f64>()
        .sqrt()
}

/// Consensus residuals: primal `‖x − z‖` and dual `ρ‖z − z_prev‖`
/// (Frobenius over all resources and steps).
fn consensus_residuals(
    x: &[Trajectory],
    z: &[Trajectory],
    z_prev: &[Trajectory],
    rho: f64,
) -> (f64, f64) {
    let diff_norm = |a: &[Trajectory], b: &[Trajectory]| -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(ta, tb)| ta.iter().zip(tb))
            .map(|(pa, pb)| {
                let dp = pa[0] - pb[0];
                let dq = pa[1] - pb[1];
                dp * dp + dq * dq
            })
            .sum::<f64>()
            .sqrt()
    };
    (diff_norm(x, z), rho * diff_norm(z, z_prev))
}

/// Result of one consensus control step.
#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    /// Final iterate, for warm-starting the next control step.
    pub state: AdmmState,
    pub report: ConvergenceReport,
    /// First-step actuation per resource name, taken from the
    /// resource-feasible copies of the reported iterate.
    pub setpoints: BTreeMap<String, ResourceSetpoint>,
}

/// Runs the consensus iteration for one control step: per-resource proximal
/// updates, the aggregator's coupled update, dual ascent, and residual-based
/// penalty adaptation, until both residuals pass their tolerances or the
/// iteration budget is spent (then the best iterate seen is reported, marked
/// unconverged).
pub fn run_admm(
    ctx: &StepContext,
    warm: Option<AdmmState>,
    policy: &PenaltyPolicy,
    tol: &AdmmTolerances,
    inner: &SolveOptions,
) -> Result<AdmmOutcome, RtError> {
    run_admm_with(ctx, warm, policy, tol, inner, &mut |c, targets, rho| {
        c.resources
            .resources
            .iter()
            .zip(targets)
            .map(|(res, target)| resource_update(res, c, target, rho, inner))
            .collect()
    })
}

/// [`run_admm`] with a caller-supplied executor for the per-resource updates.
///
/// The executor receives the proximal targets `z − u` for every resource and
/// must return one trajectory per resource, as produced by
/// [`resource_update`].  The updates are mutually independent, so an executor
/// may evaluate them concurrently; as long as it returns the same trajectories
/// as the sequential executor, the iteration sequence — and therefore every
/// reported residual, penalty value, and setpoint — is bit-for-bit identical,
/// because all remaining arithmetic is shared.
pub fn run_admm_with(
    ctx: &StepContext,
    warm: Option<AdmmState>,
    policy: &PenaltyPolicy,
    tol: &AdmmTolerances,
    inner: &SolveOptions,
    x_update: &mut dyn FnMut(&StepContext, &[Trajectory], f64) -> Result<Vec<Trajectory>, RtError>,
) -> Result<AdmmOutcome, RtError> {
    let h = ctx.validate()?;
    policy.validate()?;
    tol.validate()?;
    let rn = ctx.resources.len();
    let mut st = match warm {
        Some(s) => {
            let dims_ok = |v: &[Trajectory]| v.len() == rn && v.iter().all(|tr| tr.len() == h);
            if !(dims_ok(&s.x) && dims_ok(&s.z) && dims_ok(&s.u) && s.rho > 0.0) {
                return Err(RtError::Input(format!(
                    "warm-start state does not match {rn} resources × {h} steps"
                )));
            }
            s
        }
        None => AdmmState::cold(rn, h, policy.rho_init),
    };
    st.history.clear();

    let sqrt_n = ((2 * rn * h) as f64).sqrt();
    let mut agg = AggregatorProblem::build(ctx, false)?;
    let mut soft = false;
    let mut gap_kw = 0.0f64;

    // (score, x copy, primal, dual, eps_pri, eps_dual, iteration)
    let mut best: Option<(f64, Vec<Trajectory>, f64, f64, f64, f64, usize)> = None;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY);

    let mut targets: Vec<Trajectory> = vec![vec![[0.0; 2]; h]; rn];
    for k in 1..=tol.max_iterations {
        iterations = k;

        // Resource updates toward z − u.
        for r_idx in 0..rn {
            for t in 0..h {
                targets[r_idx][t] = [
                    st.z[r_idx][t][0] - st.u[r_idx][t][0],
                    st.z[r_idx][t][1] - st.u[r_idx][t][1],
                ];
            }
        }
        let xs = x_update(ctx, &targets, st.rho)?;
        if xs.len() != rn || xs.iter().any(|tr| tr.len() != h) {
            return Err(RtError::Input(format!(
                "resource-update executor returned wrong dimensions (expected {rn} trajectories of {h} steps)"
            )));
        }
        st.x = xs;

        // Aggregator update toward x + u.
        for r_idx in 0..rn {
            for t in 0..h {
                targets[r_idx][t] = [
                    st.x[r_idx][t][0] + st.u[r_idx][t][0],
                    st.x[r_idx][t][1] + st.u[r_idx][t][1],
                ];
            }
        }
        let z_prev = std::mem::take(&mut st.z);
        let step = match agg.solve(&targets, st.rho, inner) {
            Ok(step) => step,
            Err(RtError::NotOptimal { .. }) if !soft => {
                soft = true;
                agg = AggregatorProblem::build(ctx, true)?;
                agg.solve(&targets, st.rho, inner)?
            }
            Err(e) => return Err(e),
        };
        st.z = step.z;
        gap_kw = gap_kw.max(step.tracking_gap_kw);

        let (primal, dual) = consensus_residuals(&st.x, &st.z, &z_prev, st.rho);

        // Dual ascent on the consensus gap.
        for r_idx in 0..rn {
            for t in 0..h {
                st.u[r_idx][t][0] += st.x[r_idx][t][0] - st.z[r_idx][t][0];
                st.u[r_idx][t][1] += st.x[r_idx][t][1] - st.z[r_idx][t][1];
            }
        }

        let eps_pri = tol.eps_abs * sqrt_n + tol.eps_rel * frob(&st.x).max(frob(&st.z));
        let eps_dual = tol.eps_abs * sqrt_n + tol.eps_rel * st.rho * frob(&st.u);
        st.history.push(ResidualSample {
            primal,
            dual,
            rho: st.rho,
        });
        last = (primal, dual, eps_pri, eps_dual);

        let score = (primal / eps_pri).max(dual / eps_dual);
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, st.x.clone(), primal, dual, eps_pri, eps_dual, k));
        }
        if primal <= eps_pri && dual <= eps_dual {
            converged = true;
            break;
        }
        st.adapt_penalty(policy, primal, dual);
    }

    let (x_report, primal, dual, eps_pri, eps_dual) = if converged {
        (&st.x, last.0, last.1, last.2, last.3)
    } else {
        let b = best.as_ref().expect("at least one iteration ran");
        (&b.1, b.2, b.3, b.4, b.5)
    };
    let setpoints = ctx
        .resources
        .resources
        .iter()
        .zip(x_report)
        .map(|(r, tr)| {
            (
                r.name.clone(),
                ResourceSetpoint {
                    p_kw: tr[0][0],
                    q_kvar: tr[0][1],
                },
            )
        })
        .collect();
    let report = ConvergenceReport {
        iterations,
        converged,
        primal_norm: primal,
        dual_norm: dual,
        eps_primal: eps_pri,
        eps_dual: eps_dual,
        soft_tracking: soft,
        tracking_gap_kw: gap_kw,
    };
    Ok(AdmmOutcome {
        state: st,
        report,
        setpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{compute_sensitivities, PowerFlowOptions};
    use crate::resources::{BatteryParams, PvParams};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn chain(buses: usize, r_ohm: f64, x_ohm: f64) -> NetworkModel {
        let mut text = String::from(
            "[base]\nv_base_v = 400.0\ns_base_va = 100000.0\nslack_v_pu = 1.0\n[buses]\n1 slack\n",
        );
        for b in 2..=buses {
            text.push_str(&format!("{b} pq\n"));
        }
        text.push_str("[lines]\n");
        for b in 2..=buses {
            text.push_str(&format!("{} {b} {r_ohm} {x_ohm} 250.0\n", b - 1));
        }
        NetworkModel::from_str_contents(&text).unwrap()
    }

    fn battery(name: &str, bus: u32, s_max: f64) -> Resource {
        Resource {
            name: name.into(),
            kind: ResourceKind::Battery {
                params: BatteryParams {
                    bus,
                    capacity_kwh: 25.0,
                    s_max_kva: s_max,
                    backoff: 0.1,
                    t_s_s: 30.0,
                    efficiency: 1.0,
                },
                initial_soe_kwh: 18.75,
            },
        }
    }

    fn pv(name: &str, bus: u32, s_max: f64, reactive: bool) -> Resource {
        Resource {
            name: name.into(),
            kind: ResourceKind::Pv(PvParams {
                bus,
                s_max_kva: s_max,
                reactive_capable: reactive,
            }),
        }
    }

    /// Owns everything a [`StepContext`] borrows.
    struct Owned {
        net: NetworkModel,
        res: ResourceSet,
        lin: LinearGridModel,
        limits: Option<GridLimits>,
        pf: PfLimit,
        plan: Vec<f64>,
        demand: Vec<InjectionVector>,
        soe: BTreeMap<String, f64>,
        pot: BTreeMap<String, Vec<f64>>,
    }

    impl Owned {
        fn ctx(&self) -> StepContext<'_> {
            StepContext {
                network: &self.net,
                resources: &self.res,
                lin: &self.lin,
                limits: self.limits.as_ref(),
                pf: self.pf,
                plan_p_kw: &self.plan,
                demand: &self.demand,
                soe_kwh: &self.soe,
                pv_potential_kw: &self.pot,
            }
        }
    }

    /// Builds a context over `net` with per-step series; the sensitivity
    /// model is linearized around demand plus PV at potential.
    fn owned(
        net: NetworkModel,
        res: ResourceSet,
        demand_pq: &[(u32, Vec<f64>, Vec<f64>)],
        pot_kw: &[(&str, Vec<f64>)],
        plan: Vec<f64>,
        limits: Option<GridLimits>,
    ) -> Owned {
        let h = plan.len();
        let mut op = InjectionVector::zeros(&net);
        for (bus, p, q) in demand_pq {
            op.add_kw(&net, *bus, p[0], q[0]).unwrap();
        }
        for (name, series) in pot_kw {
            let bus = res
                .resources
                .iter()
                .find(|r| r.name == *name)
                .expect("potential for unknown pv")
                .bus();
            op.add_kw(&net, bus, series[0], 0.0).unwrap();
        }
        let lin = compute_sensitivities(&net, &op, &PowerFlowOptions::default()).unwrap();

        let demand = (0..h)
            .map(|t| {
                let mut inj = InjectionVector::zeros(&net);
                for (bus, p, q) in demand_pq {
                    inj.add_kw(&net, *bus, p[t], q[t]).unwrap();
                }
                inj
            })
            .collect();
        let soe = res
            .batteries()
            .map(|(r, _, soe0)| (r.name.clone(), soe0))
            .collect();
        let pot = pot_kw
            .iter()
            .map(|(name, series)| (name.to_string(), series.clone()))
            .collect();
        Owned {
            net,
            res,
            lin,
            limits,
            pf: PfLimit::default(),
            plan,
            demand,
            soe,
            pot,
        }
    }

    /// Near-lossless 3-bus feeder: battery on bus 2, reactive-capable PV and
    /// the load on bus 3.  The load's reactive draw is small enough that the
    /// power-factor cone stays strictly inactive at plans a few kW below the
    /// net demand, so the tracking optimum is unique and reachable by both
    /// the centralized and the consensus path.
    fn toy(h: usize, plan_kw: f64) -> Owned {
        owned(
            chain(3, 2e-5, 2e-5),
            ResourceSet::new(vec![battery("bess", 2, 25.0), pv("pv", 3, 16.0, true)]).unwrap(),
            &[(3, vec![-10.0; h], vec![-0.5; h])],
            &[("pv", vec![4.0; h])],
            vec![plan_kw; h],
            None,
        )
    }

    /// The centralized intrinsic cost evaluated on (p, q) trajectories: PV
    /// tracking plus the battery regularizer (grid coupling is a constraint,
    /// not a cost).
    fn intrinsic_cost(own: &Owned, trajs: &[Trajectory]) -> f64 {
        let mut f = 0.0;
        for (r, tr) in own.res.resources.iter().zip(trajs) {
            match &r.kind {
                ResourceKind::Battery { .. } => {
                    for p in tr {
                        f += BATTERY_RT_REG_KW2 * (p[0] * p[0] + p[1] * p[1]);
                    }
                }
                ResourceKind::Pv(_) => {
                    let pot = &own.pot[&r.name];
                    for (t, p) in tr.iter().enumerate() {
                        f += (p[0] - pot[t]).powi(2) + p[1] * p[1];
                    }
                }
            }
        }
        f
    }

    #[test]
    fn horizon_truncates_at_day_end() {
        assert_eq!(Horizon::new(0, 2880, 60).unwrap().len, 60);
        let tail = Horizon::new(2850, 2880, 60).unwrap();
        assert_eq!((tail.len, tail.end()), (30, 2880));
        assert_eq!(Horizon::new(2879, 2880, 60).unwrap().len, 1);
        assert!(Horizon::new(2880, 2880, 60).is_err());
        assert!(Horizon::new(0, 2880, 0).is_err());
    }

    #[test]
    fn penalty_adaptation_matches_reference_ratios() {
        let pol = PenaltyPolicy::default();
        // Primal residual dominating by more than mu → grow.
        assert_abs_diff_eq!(pol.adapt(1.0, 25.0, 2.0), 2.0);
        // Dual residual dominating → shrink.
        assert_abs_diff_eq!(pol.adapt(1.0, 2.0, 25.0), 0.5);
        // Balanced residuals → unchanged.
        assert_abs_diff_eq!(pol.adapt(1.0, 5.0, 5.0), 1.0);
        // Clamping at the configured range.
        assert_abs_diff_eq!(pol.adapt(1e4, 100.0, 0.0), 1e4);
        assert_abs_diff_eq!(pol.adapt(1e-4, 0.0, 100.0), 1e-4);
    }

    #[test]
    fn penalty_rescaling_preserves_scaled_duals() {
        let mut st = AdmmState::cold(2, 3, 1.0);
        for (r, tr) in st.u.iter_mut().enumerate() {
            for (t, pair) in tr.iter_mut().enumerate() {
                *pair = [0.3 * (r as f64 + 1.0) + t as f64, -1.25 * (t as f64 + 1.0)];
            }
        }
        let y_before: Vec<f64> = st
            .u
            .iter()
            .flatten()
            .flat_map(|p| [st.rho * p[0], st.rho * p[1]])
            .collect();
        st.adapt_penalty(&PenaltyPolicy::default(), 25.0, 2.0);
        assert_abs_diff_eq!(st.rho, 2.0);
        let y_after: Vec<f64> = st
            .u
            .iter()
            .flatten()
            .flat_map(|p| [st.rho * p[0], st.rho * p[1]])
            .collect();
        let drift = y_before
            .iter()
            .zip(&y_after)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-12, "unscaled duals drifted by {drift}");
    }

    #[test]
    fn dual_update_is_accumulated_consensus_gap() {
        // u ← u + x − z, entry by entry.
        let mut st = AdmmState::cold(1, 2, 1.0);
        st.u[0] = vec![[0.5, -0.5], [1.0, 0.0]];
        st.x[0] = vec![[2.0, 1.0], [3.0, -1.0]];
        st.z[0] = vec![[1.5, 1.25], [3.5, -1.0]];
        for t in 0..2 {
            st.u[0][t][0] += st.x[0][t][0] - st.z[0][t][0];
            st.u[0][t][1] += st.x[0][t][1] - st.z[0][t][1];
        }
        assert_eq!(st.u[0], vec![[1.0, -0.75], [0.5, 0.0]]);
        // Residual norms on the same data.
        let (r, s) = consensus_residuals(&st.x, &st.z, &vec![vec![[0.0; 2]; 2]; 1], 2.0);
        let expect_r = (0.25f64 + 0.0625 + 0.25 + 0.0).sqrt();
        let expect_s = 2.0 * (1.5f64 * 1.5 + 1.25 * 1.25 + 3.5 * 3.5 + 1.0).sqrt();
        assert_abs_diff_eq!(r, expect_r, epsilon = 1e-12);
        assert_abs_diff_eq!(s, expect_s, epsilon = 1e-12);
    }

    #[test]
    fn battery_local_update_projects_feasible_target() {
        let own = toy(2, -6.0);
        let target = vec![[5.0, 2.0], [-4.0, 1.0]];
        let x = resource_update(
            &own.res.resources[0],
            &own.ctx(),
            &target,
            2.0,
            &SolveOptions::default(),
        )
        .unwrap();
        // Inside the feasible set the proximal update returns the target
        // itself (up to the µ-scale regularizer).
        for (got, want) in x.iter().zip(&target) {
            assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-4);
            assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-4);
        }
    }

    #[test]
    fn pv_local_update_blends_potential_and_target() {
        let mut own = toy(1, -6.0);
        own.pot.insert("pv".into(), vec![10.0]);
        let x = resource_update(
            &own.res.resources[1],
            &own.ctx(),
            &[[6.0, 0.0]],
            2.0,
            &SolveOptions::default(),
        )
        .unwrap();
        // argmin (p − 10)² + (ρ/2)(p − 6)² with ρ = 2 → (2·10 + 2·6)/4 = 8.
        assert_abs_diff_eq!(x[0][0], 8.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[0][1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn aggregator_is_prox_identity_when_constraints_already_hold() {
        // Pick targets, then set the plan so the dispatch equality holds at
        // exactly those targets: the proximal objective is then minimized at
        // z = x + u and no constraint pulls it away.
        let h = 2;
        let mut own = toy(h, 0.0);
        let targets: Vec<Trajectory> = vec![
            vec![[3.0, 0.1], [2.0, 0.15]],
            vec![[4.0, 0.2], [4.0, 0.1]],
        ];
        let m = own.net.non_slack().len();
        let cols: Vec<ResourceCols> = own
            .res
            .resources
            .iter()
            .map(|r| {
                let k = own.net.injection_index(r.bus()).unwrap();
                ResourceCols { p: k, q: m + k }
            })
            .collect();
        for t in 0..h {
            let g = gcp_terms(&own.lin, &own.demand[t], &cols, 100.0);
            own.plan[t] = g.const_p_kw
                + g.dp
                    .iter()
                    .zip(&targets)
                    .map(|(d, tr)| d[0] * tr[t][0] + d[1] * tr[t][1])
                    .sum::<f64>();
        }
        let agg = AggregatorProblem::build(&own.ctx(), false).unwrap();
        let step = agg.solve(&targets, 1.0, &SolveOptions::default()).unwrap();
        for (zr, tr) in step.z.iter().zip(&targets) {
            for (zp, tp) in zr.iter().zip(tr) {
                assert_abs_diff_eq!(zp[0], tp[0], epsilon = 1e-5);
                assert_abs_diff_eq!(zp[1], tp[1], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn aggregator_shifts_resources_equally_toward_dispatch() {
        // On a near-lossless feeder the dispatch row has unit coefficients,
        // so projecting equal targets onto a 3 kW smaller dispatch splits
        // the shift equally between the two resources.
        let h = 1;
        let mut own = toy(h, 0.0);
        let targets: Vec<Trajectory> = vec![vec![[3.0, 0.2]], vec![[4.0, 0.3]]];
        let m = own.net.non_slack().len();
        let cols: Vec<ResourceCols> = own
            .res
            .resources
            .iter()
            .map(|r| {
                let k = own.net.injection_index(r.bus()).unwrap();
                ResourceCols { p: k, q: m + k }
            })
            .collect();
        let g = gcp_terms(&own.lin, &own.demand[0], &cols, 100.0);
        let at_targets = g.const_p_kw
            + g.dp
                .iter()
                .zip(&targets)
                .map(|(d, tr)| d[0] * tr[0][0] + d[1] * tr[0][1])
                .sum::<f64>();
        own.plan[0] = at_targets - 3.0;
        let agg = AggregatorProblem::build(&own.ctx(), false).unwrap();
        let step = agg.solve(&targets, 1.0, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(step.z[0][0][0], 3.0 - 1.5, epsilon = 1e-3);
        assert_abs_diff_eq!(step.z[1][0][0], 4.0 - 1.5, epsilon = 1e-3);
        // Reactive copies stay put (the cone is slack at these values).
        assert_abs_diff_eq!(step.z[0][0][1], 0.2, epsilon = 1e-3);
        assert_abs_diff_eq!(step.z[1][0][1], 0.3, epsilon = 1e-3);
    }

    #[test]
    fn sharing_toy_reaches_known_optimum() {
        // min x₁² + (x₂ − 4)² subject to x₁ + x₂ = 2; optimum (−1, 3).  Run
        // the same split this module uses: proximal resource updates, an
        // equality-constrained aggregator, dual ascent, penalty balancing.
        let pol = PenaltyPolicy::default();
        let tol = AdmmTolerances {
            eps_abs: 1e-6,
            eps_rel: 0.0,
            max_iterations: 100,
        };
        let opts = SolveOptions::default();
        let mut st = AdmmState::cold(2, 1, pol.rho_init);
        let mut took = None;
        for k in 1..=tol.max_iterations {
            for i in 0..2 {
                let mut prob = ConvexProblem::new(1);
                prob.add_square(1.0, &[(0, 1.0)], if i == 0 { 0.0 } else { -4.0 });
                prob.add_square(0.5 * st.rho, &[(0, 1.0)], -(st.z[i][0][0] - st.u[i][0][0]));
                st.x[i][0][0] = solve(&prob, &opts).unwrap().x[0];
            }
            let mut prob = ConvexProblem::new(2);
            for i in 0..2 {
                prob.add_square(0.5 * st.rho, &[(i, 1.0)], -(st.x[i][0][0] + st.u[i][0][0]));
            }
            prob.push_eq(&[(0, 1.0), (1, 1.0)], 2.0);
            let zsol = solve(&prob, &opts).unwrap();
            let z_prev = st.z.clone();
            for i in 0..2 {
                st.z[i][0][0] = zsol.x[i];
            }
            let (r, s) = consensus_residuals(&st.x, &st.z, &z_prev, st.rho);
            for i in 0..2 {
                st.u[i][0][0] += st.x[i][0][0] - st.z[i][0][0];
            }
            let n = 2.0f64.sqrt();
            if r <= tol.eps_abs * n && s <= tol.eps_abs * n {
                took = Some(k);
                break;
            }
            st.adapt_penalty(&pol, r, s);
        }
        let took = took.expect("sharing consensus did not converge in 100 iterations");
        assert!(took < 100);
        assert_abs_diff_eq!(st.x[0][0][0], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(st.x[1][0][0], 3.0, epsilon = 1e-4);
    }

    #[test]
    fn distributed_matches_centralized_on_toy_feeder() {
        let own = toy(4, -3.0);
        let inner = SolveOptions::default();
        let cent = solve_centralized(&own.ctx(), &inner).unwrap();
        assert!(!cent.soft_tracking);
        // Tight tolerances: this verifies the two formulations agree, not
        // the production stopping rule.
        let tol = AdmmTolerances {
            eps_abs: 1e-5,
            eps_rel: 1e-4,
            max_iterations: 500,
        };
        let out = run_admm(&own.ctx(), None, &PenaltyPolicy::default(), &tol, &inner).unwrap();
        assert!(out.report.converged, "report: {:?}", out.report);
        for r in &own.res.resources {
            let a = out.setpoints[&r.name];
            let b = cent.setpoints[&r.name];
            let tol_kw = 1e-3 * r.rating_kva();
            assert!(
                (a.p_kw - b.p_kw).abs() <= tol_kw && (a.q_kvar - b.q_kvar).abs() <= tol_kw,
                "{}: distributed ({:.5}, {:.5}) vs centralized ({:.5}, {:.5})",
                r.name,
                a.p_kw,
                a.q_kvar,
                b.p_kw,
                b.q_kvar
            );
        }
        let gap = (intrinsic_cost(&own, &out.state.x) - cent.objective).abs();
        assert!(
            gap <= 0.01 * cent.objective.abs().max(1e-3),
            "objective gap {gap} vs centralized {}",
            cent.objective
        );
    }

    #[test]
    fn default_tolerances_converge_within_budget_on_toy() {
        let own = toy(8, -3.0);
        let out = run_admm(
            &own.ctx(),
            None,
            &PenaltyPolicy::default(),
            &AdmmTolerances::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(out.report.converged, "report: {:?}", out.report);
        assert!(
            out.report.iterations <= 50,
            "took {} iterations",
            out.report.iterations
        );
        assert!(!out.report.soft_tracking);
    }

    #[test]
    fn randomized_instances_match_centralized() {
        let inner = SolveOptions::default();
        let tol = AdmmTolerances {
            eps_abs: 1e-5,
            eps_rel: 1e-4,
            max_iterations: 300,
        };
        for seed in 0..6u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let h = rng.gen_range(1..=5usize);
            let mut fleet = vec![battery("bess", 2, 25.0)];
            let n_pv = rng.gen_range(0..=2usize);
            for i in 0..n_pv {
                fleet.push(pv(
                    &format!("pv{i}"),
                    if i == 0 { 3 } else { 2 },
                    10.0 + 3.0 * i as f64,
                    rng.gen_bool(0.5),
                ));
            }
            let res = ResourceSet::new(fleet).unwrap();
            let demand_p: Vec<f64> = (0..h).map(|_| rng.gen_range(-30.0..-5.0)).collect();
            let demand_q: Vec<f64> = demand_p.iter().map(|p| 0.1 * p).collect();
            let pots: Vec<(String, Vec<f64>)> = res
                .pvs()
                .map(|(r, _)| {
                    (
                        r.name.clone(),
                        (0..h).map(|_| rng.gen_range(0.0..12.0)).collect(),
                    )
                })
                .collect();
            // Plan = a fraction of the demand: the battery absorbs the PV
            // surplus within its rating and SOE headroom, and the reactive
            // cone stays strictly inactive (0.1 |d| < tan θ_m · 0.45 |d|),
            // so the optimum is unique and both paths can reach it.
            let plan: Vec<f64> = (0..h)
                .map(|t| demand_p[t] * rng.gen_range(0.45..0.85))
                .collect();
            let pot_refs: Vec<(&str, Vec<f64>)> = pots
                .iter()
                .map(|(n, s)| (n.as_str(), s.clone()))
                .collect();
            let own = owned(
                chain(3, 2e-5, 2e-5),
                res,
                &[(3, demand_p, demand_q)],
                &pot_refs,
                plan,
                None,
            );
            let cent = solve_centralized(&own.ctx(), &inner).unwrap();
            assert!(!cent.soft_tracking, "seed {seed} fell back to soft tracking");
            let out =
                run_admm(&own.ctx(), None, &PenaltyPolicy::default(), &tol, &inner).unwrap();
            assert!(out.report.converged, "seed {seed}: {:?}", out.report);
            for r in &own.res.resources {
                let a = out.setpoints[&r.name];
                let b = cent.setpoints[&r.name];
                let tol_kw = 1e-3 * r.rating_kva();
                assert!(
                    (a.p_kw - b.p_kw).abs() <= tol_kw && (a.q_kvar - b.q_kvar).abs() <= tol_kw,
                    "seed {seed}, {}: ({:.5}, {:.5}) vs ({:.5}, {:.5})",
                    r.name,
                    a.p_kw,
                    a.q_kvar,
                    b.p_kw,
                    b.q_kvar
                );
            }
            let gap = (intrinsic_cost(&own, &out.state.x) - cent.objective).abs();
            assert!(
                gap <= 0.01 * cent.objective.abs().max(1e-3),
                "seed {seed}: objective gap {gap} vs {}",
                cent.objective
            );
        }
    }

    #[test]
    fn active_pf_bound_layers_agree_on_service_not_allocation() {
        // A heavy reactive draw makes the power-factor cone bind, and the
        // battery — whose real-time cost is constant — is the cheap reactive
        // provider.  Inside the cone its reactive power sees essentially no
        // objective slope, so the consensus iteration may settle anywhere
        // past the boundary the centralized solver sits on: the layers are
        // guaranteed to agree on active power, feasibility and cost, not on
        // the reactive split between units.  Deterministic fixture.
        let own = owned(
            chain(3, 2e-5, 2e-5),
            ResourceSet::new(vec![battery("bess", 2, 25.0), pv("pv", 3, 16.0, true)]).unwrap(),
            &[(3, vec![-10.0; 2], vec![-2.0; 2])],
            &[("pv", vec![4.0; 2])],
            vec![-3.0; 2],
            None,
        );
        let inner = SolveOptions::default();
        let cent = solve_centralized(&own.ctx(), &inner).unwrap();
        assert!(!cent.soft_tracking);
        let tol = AdmmTolerances {
            eps_abs: 1e-5,
            eps_rel: 1e-4,
            max_iterations: 300,
        };
        let out = run_admm(&own.ctx(), None, &PenaltyPolicy::default(), &tol, &inner).unwrap();

        // Active power agrees tightly; reactive only loosely.
        for r in &own.res.resources {
            let a = out.setpoints[&r.name];
            let b = cent.setpoints[&r.name];
            assert!(
                (a.p_kw - b.p_kw).abs() <= 1e-3 * r.rating_kva(),
                "{}: active power {:.5} vs {:.5}",
                r.name,
                a.p_kw,
                b.p_kw
            );
            assert!(
                (a.q_kvar - b.q_kvar).abs() <= 0.05 * r.rating_kva(),
                "{}: reactive power {:.5} vs {:.5}",
                r.name,
                a.q_kvar,
                b.q_kvar
            );
        }
        // Both deliver the reactive service: the GCP power factor holds.
        let m = own.net.non_slack().len();
        let cols: Vec<ResourceCols> = own
            .res
            .resources
            .iter()
            .map(|r| {
                let k = own.net.injection_index(r.bus()).unwrap();
                ResourceCols { p: k, q: m + k }
            })
            .collect();
        let cap = own.pf.tan_theta_m() * own.plan[0].abs();
        for sps in [&cent.setpoints, &out.setpoints] {
            let g = gcp_terms(&own.lin, &own.demand[0], &cols, 100.0);
            let q0: f64 = g.const_q_kw
                + own
                    .res
                    .resources
                    .iter()
                    .zip(&g.dq)
                    .map(|(r, d)| {
                        let sp = sps[&r.name];
                        d[0] * sp.p_kw + d[1] * sp.q_kvar
                    })
                    .sum::<f64>();
            assert!(
                q0.abs() <= cap + 1e-4,
                "GCP reactive {q0:.5} exceeds cone cap {cap:.5}"
            );
        }
        // And on cost the layers are equivalent.
        let gap = (intrinsic_cost(&own, &out.state.x) - cent.objective).abs();
        assert!(gap <= 1e-3, "objective gap {gap}");
    }

    #[test]
    fn infeasible_tracking_engages_slack_and_reports() {
        // Battery at the bottom of its SOE band cannot discharge, yet the
        // plan asks for 5 kW of export against 10 kW of demand.
        let mut own = owned(
            chain(2, 2e-5, 2e-5),
            ResourceSet::new(vec![battery("bess", 2, 25.0)]).unwrap(),
            &[(2, vec![-10.0], vec![0.0])],
            &[],
            vec![5.0],
            None,
        );
        let floor = {
            let (_, params, _) = own.res.batteries().next().unwrap();
            params.soe_min_kwh()
        };
        own.soe.insert("bess".into(), floor);
        let sol = solve_centralized(&own.ctx(), &SolveOptions::default()).unwrap();
        assert!(sol.soft_tracking);
        // Best effort is battery idle: the full 15 kW shortfall lands in the
        // slack (up to losses).
        assert_abs_diff_eq!(sol.tracking_gap_kw, 15.0, epsilon = 0.1);
        assert!(sol.setpoints["bess"].p_kw.abs() < 0.1);

        // The consensus split sees the same wall as a persistent primal gap:
        // its aggregator alone stays feasible, so it reports non-convergence
        // rather than a slack.
        let out = run_admm(
            &own.ctx(),
            None,
            &PenaltyPolicy::default(),
            &AdmmTolerances::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(!out.report.converged);
        assert!(out.report.primal_norm > out.report.eps_primal);
    }

    #[test]
    fn voltage_limit_met_through_reactive_support() {
        // Weak feeder: the load drags bus 2 under 0.95 pu, and with the
        // dispatch equality pinning active power the battery must lift the
        // voltage with reactive injection.
        let net = chain(2, 0.4, 0.8);
        let res = ResourceSet::new(vec![battery("bess", 2, 30.0)]).unwrap();
        let limits = GridLimits::from_network(&net, 0.95, 1.05);
        let mut own = owned(
            net,
            res,
            &[(2, vec![-20.0], vec![-5.0])],
            &[],
            vec![0.0],
            Some(limits),
        );
        // Track the uncontrolled feeder (battery p ≈ 0): compute p₀ at idle.
        let m = own.net.non_slack().len();
        let k = own.net.injection_index(2).unwrap();
        let cols = vec![ResourceCols { p: k, q: m + k }];
        let g = gcp_terms(&own.lin, &own.demand[0], &cols, 100.0);
        own.plan[0] = g.const_p_kw;

        let sol = solve_centralized(&own.ctx(), &SolveOptions::default()).unwrap();
        assert!(!sol.soft_tracking);
        let sp = sol.setpoints["bess"];
        assert!(sp.q_kvar > 3.0, "expected reactive support, got {sp:?}");
        assert!(sp.p_kw.abs() < 0.5, "active power should stay planned: {sp:?}");
        // The affine model predicts the band is respected.
        let mut inj = InjectionVector::zeros(&own.net);
        inj.add_kw(&own.net, 2, -20.0 + sp.p_kw, -5.0 + sp.q_kvar).unwrap();
        let st = own.lin.predict_state(&inj).unwrap();
        assert!(st.v_pu[0] >= 0.95 - 1e-4, "predicted voltage {}", st.v_pu[0]);
    }

    #[test]
    fn warm_state_shift_preserves_tail() {
        let mut st = AdmmState::cold(1, 3, 2.5);
        st.x[0] = vec![[1.0, 0.1], [2.0, 0.2], [3.0, 0.3]];
        st.z[0] = st.x[0].clone();
        st.u[0] = vec![[9.0, 0.9], [8.0, 0.8], [7.0, 0.7]];
        let next = st.shifted_for_next_step(3);
        assert_eq!(next.x[0], vec![[2.0, 0.2], [3.0, 0.3], [3.0, 0.3]]);
        assert_eq!(next.u[0], vec![[8.0, 0.8], [7.0, 0.7], [7.0, 0.7]]);
        assert_eq!(next.rho, 2.5);
        // Truncated near the end of the day.
        let short = st.shifted_for_next_step(1);
        assert_eq!(short.x[0], vec![[2.0, 0.2]]);
    }

    #[test]
    fn context_validation_rejects_mismatched_series() {
        let own = toy(3, -6.0);
        let mut bad = own.ctx();
        let short_plan = vec![-6.0; 2];
        bad.plan_p_kw = &short_plan;
        assert!(matches!(
            solve_centralized(&bad, &SolveOptions::default()),
            Err(RtError::Input(_))
        ));

        let mut no_soe = toy(3, -6.0);
        no_soe.soe.clear();
        assert!(matches!(
            solve_centralized(&no_soe.ctx(), &SolveOptions::default()),
            Err(RtError::Input(_))
        ));

        let mut no_pot = toy(3, -6.0);
        no_pot.pot.clear();
        assert!(matches!(
            run_admm(
                &no_pot.ctx(),
                None,
                &PenaltyPolicy::default(),
                &AdmmTolerances::default(),
                &SolveOptions::default()
            ),
            Err(RtError::Input(_))
        ));
    }
}
