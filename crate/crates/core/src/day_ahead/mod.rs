//! Day-ahead scheduling: one convex quadratic program over the whole day
//! decides a single dispatch trajectory at the grid connection point (GCP)
//! together with a per-scenario operating plan for every resource.
//!
//! Variables, per step `t` (time-major) — the shared dispatch pair
//! `(p̂_t, q̂_t)`, then per scenario `ω` the resource variables (battery
//! `p, q, soe`; PV `p, q`) followed by a non-negative import/export split
//! `(p₀⁺, p₀⁻)` of the predicted GCP active power.
//!
//! Constraints, per `(t, ω)` — the split equality `p₀⁺ − p₀⁻ = p₀(x)` where
//! `p₀(x)` is the affine GCP prediction through that scenario-step's
//! linearized grid model (losses included); the power-factor cone
//! `|q₀(x)| ≤ tan θ_m · (p₀⁺ + p₀⁻)`; optional voltage-band and ampacity
//! rows through the same affine model; and each resource's feasible set
//! (SOE recurrence and band, rating disks, curtailment boxes).
//!
//! Objective — the scenario-averaged squared deviation between predicted GCP
//! power and the dispatch pair, per-resource usage costs weighted by λ, and
//! a quadratic penalty ν on the split pair that keeps the split minimal
//! (mutually exclusive wherever the cone is slack).

mod plan_file;

pub use plan_file::{load_plan, plan_from_str, plan_to_string, save_plan};

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::{DateTime, Utc};
use rayon::prelude::*;

use crate::forecasting::{Scenario, ScenarioSet};
use crate::grid::affine::{gcp_terms, limit_rows, ResourceCols};
use crate::grid::{
    compute_sensitivities, GridError, GridLimits, InjectionVector, LinearGridModel, NetworkModel,
    PowerFlowOptions,
};
use crate::qp::{
    solve, ConvexProblem, SolveError, SolveOptions, SolverSolution, SolverStatus,
};
use crate::resources::{
    battery_dayahead_blocks, pv_constraint_block, pv_cost_block, BatteryVars, PvPotential, PvVars,
    ResourceError, ResourceKind, ResourceSet,
};

#[derive(Debug, thiserror::Error)]
pub enum DayAheadError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error("inconsistent scheduling inputs: {0}")]
    Input(String),
    #[error(
        "scheduling program did not reach optimality: {status:?} after {iterations} iterations \
         (kkt residual {kkt_max:.3e})"
    )]
    NotOptimal {
        status: SolverStatus,
        iterations: usize,
        kkt_max: f64,
    },
    #[error("plan file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// GCP power-factor requirement plus the weight of the split penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfLimit {
    /// Minimum power factor `|p₀| / ‖(p₀, q₀)‖` the feeder must present at
    /// the GCP (1.0 pins the reactive exchange to zero).
    pub cos_theta_min: f64,
    /// Weight of the quadratic penalty on each split variable.
    pub nu: f64,
}

impl Default for PfLimit {
    fn default() -> Self {
        PfLimit {
            cos_theta_min: 0.95,
            nu: 1e-3,
        }
    }
}

impl PfLimit {
    pub fn validate(&self) -> Result<(), DayAheadError> {
        if !(self.cos_theta_min > 0.0 && self.cos_theta_min <= 1.0) {
            return Err(DayAheadError::Input(format!(
                "cos_theta_min must be in (0, 1], got {}",
                self.cos_theta_min
            )));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(DayAheadError::Input(format!(
                "nu must be finite and non-negative, got {}",
                self.nu
            )));
        }
        Ok(())
    }

    /// Half-angle of the admissible apparent-power cone.
    pub fn theta_m(&self) -> f64 {
        self.cos_theta_min.min(1.0).acos()
    }

    /// `tan θ_m`; the cone reads `|q₀| ≤ tan θ_m · (p₀⁺ + p₀⁻)`.
    pub fn tan_theta_m(&self) -> f64 {
        self.theta_m().tan()
    }
}

/// Which components of the GCP deviation the objective tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeviationMode {
    /// Track both components of the dispatched complex power.
    #[default]
    Complex,
    /// Track active power only.  The reported plan's reactive column is then
    /// the scenario-mean predicted `q₀` instead of an optimized target.
    RealOnly,
}

#[derive(Debug, Clone)]
pub struct DayAheadConfig {
    pub pf: PfLimit,
    /// Per-resource usage-cost weight, by resource name; anything missing
    /// falls back to `lambda_default`.
    pub lambda: BTreeMap<String, f64>,
    pub lambda_default: f64,
    pub deviation: DeviationMode,
    /// Operational envelope enforced through the affine model.  `None` drops
    /// voltage/ampacity rows entirely (unconstrained studies and toys);
    /// callers wanting headroom against linearization error should pass an
    /// already-tightened envelope (see [`GridLimits::tightened`]).
    pub limits: Option<GridLimits>,
    pub solver: SolveOptions,
    /// Plan metadata stamped on the result.
    pub start_utc: DateTime<Utc>,
    pub step_s: u32,
}

impl Default for DayAheadConfig {
    fn default() -> Self {
        DayAheadConfig {
            pf: PfLimit::default(),
            lambda: BTreeMap::new(),
            lambda_default: 0.5e-4,
            deviation: DeviationMode::Complex,
            limits: None,
            solver: SolveOptions {
                // The whole-day program has ~10⁵ variables; the refinement
                // tolerances of the default profile would cost minutes for
                // digits the dispatch plan cannot use.
                eps_abs: 1e-6,
                eps_rel: 1e-6,
                kkt_tol: 1e-3,
                max_iter: 30_000,
                polish: false,
                ..SolveOptions::default()
            },
            start_utc: DateTime::UNIX_EPOCH,
            step_s: 30,
        }
    }
}

impl DayAheadConfig {
    fn validate(&self, resources: &ResourceSet) -> Result<(), DayAheadError> {
        self.pf.validate()?;
        if self.step_s == 0 {
            return Err(DayAheadError::Input("step_s must be positive".into()));
        }
        if !(self.lambda_default.is_finite() && self.lambda_default >= 0.0) {
            return Err(DayAheadError::Input(format!(
                "lambda_default must be finite and non-negative, got {}",
                self.lambda_default
            )));
        }
        for (name, &l) in &self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(DayAheadError::Input(format!(
                    "lambda for '{name}' must be finite and non-negative, got {l}"
                )));
            }
        }
        for (r, params, _) in resources.batteries() {
            if (params.t_s_s - self.step_s as f64).abs() > 1e-9 {
                return Err(DayAheadError::Input(format!(
                    "battery '{}' step length {} s differs from plan step {} s",
                    r.name, params.t_s_s, self.step_s
                )));
            }
        }
        Ok(())
    }
}

/// The dispatch trajectory at the GCP, export positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub start_utc: DateTime<Utc>,
    pub step_s: u32,
    pub p_disp_kw: Vec<f64>,
    pub q_disp_kvar: Vec<f64>,
}

impl DispatchPlan {
    pub fn len(&self) -> usize {
        self.p_disp_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_disp_kw.is_empty()
    }

    pub fn timestamp(&self, t: usize) -> DateTime<Utc> {
        self.start_utc + chrono::Duration::seconds(t as i64 * self.step_s as i64)
    }

    pub fn validate(&self) -> Result<(), DayAheadError> {
        if self.step_s == 0 {
            return Err(DayAheadError::Input("plan step must be positive".into()));
        }
        if self.p_disp_kw.is_empty() {
            return Err(DayAheadError::Input("plan has no rows".into()));
        }
        if self.p_disp_kw.len() != self.q_disp_kvar.len() {
            return Err(DayAheadError::Input(format!(
                "plan has {} active rows but {} reactive rows",
                self.p_disp_kw.len(),
                self.q_disp_kvar.len()
            )));
        }
        if self
            .p_disp_kw
            .iter()
            .chain(&self.q_disp_kvar)
            .any(|v| !v.is_finite())
        {
            return Err(DayAheadError::Input("plan contains non-finite values".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// variable layout

/// Time-major layout of the scheduling program.  Per step: the dispatch
/// pair, then for each scenario the resource variables (resource-set order,
/// `p, q` first for every kind) followed by the split pair.  Keeping each
/// step's variables contiguous bounds the bandwidth of the solver's normal
/// matrix by about two step-blocks regardless of the horizon.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    steps: usize,
    num_scenarios: usize,
    /// Offset of each resource inside a scenario chunk.
    offsets: Vec<usize>,
    per_scenario: usize,
    block: usize,
}

impl Layout {
    fn new(resources: &ResourceSet, steps: usize, num_scenarios: usize) -> Layout {
        let mut offsets = Vec::with_capacity(resources.len());
        let mut acc = 0usize;
        for r in &resources.resources {
            offsets.push(acc);
            acc += match r.kind {
                ResourceKind::Battery { .. } => 3,
                ResourceKind::Pv(_) => 2,
            };
        }
        let per_scenario = acc + 2;
        Layout {
            steps,
            num_scenarios,
            offsets,
            per_scenario,
            block: 2 + num_scenarios * per_scenario,
        }
    }

    pub(crate) fn num_vars(&self) -> usize {
        self.steps * self.block
    }

    fn p_disp(&self, t: usize) -> usize {
        t * self.block
    }

    fn q_disp(&self, t: usize) -> usize {
        t * self.block + 1
    }

    fn chunk(&self, t: usize, w: usize) -> usize {
        t * self.block + 2 + w * self.per_scenario
    }

    fn p0_plus(&self, t: usize, w: usize) -> usize {
        self.chunk(t, w) + self.per_scenario - 2
    }

    fn p0_minus(&self, t: usize, w: usize) -> usize {
        self.chunk(t, w) + self.per_scenario - 1
    }

    /// Indices of the (p, q) pair of resource `r` at `(t, ω)`.
    fn pq_of(&self, t: usize, w: usize, r: usize) -> (usize, usize) {
        let base = self.chunk(t, w) + self.offsets[r];
        (base, base + 1)
    }

    fn battery_vars(&self, w: usize, r: usize) -> BatteryVars {
        BatteryVars {
            p: (0..self.steps).map(|t| self.chunk(t, w) + self.offsets[r]).collect(),
            q: (0..self.steps)
                .map(|t| self.chunk(t, w) + self.offsets[r] + 1)
                .collect(),
            soe: (0..self.steps)
                .map(|t| self.chunk(t, w) + self.offsets[r] + 2)
                .collect(),
        }
    }

    fn pv_vars(&self, w: usize, r: usize) -> PvVars {
        PvVars {
            p: (0..self.steps).map(|t| self.chunk(t, w) + self.offsets[r]).collect(),
            q: (0..self.steps)
                .map(|t| self.chunk(t, w) + self.offsets[r] + 1)
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// build

#[derive(Debug)]
pub struct BuiltDayAhead {
    pub problem: ConvexProblem,
    pub(crate) layout: Layout,
    /// Voltage/ampacity rows kept after pruning those that no admissible
    /// resource action can make bind.
    pub grid_rows_kept: usize,
    pub grid_rows_dropped: usize,
}

/// Linearized grid model per scenario and step, computed around the forecast
/// operating point: demand plus PV at its potential, batteries idle.  The
/// scheduling rows only need the model to be accurate near the eventual
/// optimum, which curtails PV rarely and moves the batteries within rating.
pub fn linearize_scenarios(
    network: &NetworkModel,
    resources: &ResourceSet,
    scenarios: &ScenarioSet,
) -> Result<Vec<Vec<LinearGridModel>>, DayAheadError> {
    validate_scenarios(network, resources, scenarios)?;
    let opts = PowerFlowOptions::default();
    scenarios
        .scenarios
        .iter()
        .map(|sc| {
            (0..scenarios.steps)
                .into_par_iter()
                .map(|t| {
                    let mut inj = uncontrollable_injection(network, sc, t)?;
                    for (r, params) in resources.pvs() {
                        // Validated present above.
                        let pot = &sc.pv_potential_kw[&r.name];
                        inj.add_kw(network, params.bus, pot[t], 0.0)?;
                    }
                    compute_sensitivities(network, &inj, &opts).map_err(DayAheadError::from)
                })
                .collect::<Result<Vec<_>, DayAheadError>>()
        })
        .collect()
}

/// Demand-only injections of one scenario step (the additive constant of the
/// grid rows; resource injections enter through variables).
fn uncontrollable_injection(
    network: &NetworkModel,
    sc: &Scenario,
    t: usize,
) -> Result<InjectionVector, DayAheadError> {
    let mut inj = InjectionVector::zeros(network);
    for (bus, p) in &sc.demand_p_kw {
        let q = sc.demand_q_kvar.get(bus).ok_or_else(|| {
            DayAheadError::Input(format!("demand bus {bus} has no reactive series"))
        })?;
        inj.add_kw(network, *bus, p[t], q[t])?;
    }
    Ok(inj)
}

fn validate_scenarios(
    network: &NetworkModel,
    resources: &ResourceSet,
    scenarios: &ScenarioSet,
) -> Result<(), DayAheadError> {
    if scenarios.scenarios.is_empty() || scenarios.steps == 0 {
        return Err(DayAheadError::Input(
            "scheduling needs at least one scenario with at least one step".into(),
        ));
    }
    for (w, sc) in scenarios.scenarios.iter().enumerate() {
        for (what, map) in [("active", &sc.demand_p_kw), ("reactive", &sc.demand_q_kvar)] {
            for (bus, series) in map {
                if series.len() != scenarios.steps {
                    return Err(DayAheadError::Input(format!(
                        "scenario {w}: {what} demand at bus {bus} has {} steps, expected {}",
                        series.len(),
                        scenarios.steps
                    )));
                }
                if network.injection_index(*bus).is_none() {
                    return Err(DayAheadError::Input(format!(
                        "scenario {w}: demand bus {bus} is not a non-slack bus of the network"
                    )));
                }
            }
        }
        if sc.demand_p_kw.keys().ne(sc.demand_q_kvar.keys()) {
            return Err(DayAheadError::Input(format!(
                "scenario {w}: active and reactive demand cover different buses"
            )));
        }
        for (r, _) in resources.pvs() {
            match sc.pv_potential_kw.get(&r.name) {
                None => {
                    return Err(DayAheadError::Input(format!(
                        "scenario {w} has no PV potential for plant '{}'",
                        r.name
                    )))
                }
                Some(series) if series.len() != scenarios.steps => {
                    return Err(DayAheadError::Input(format!(
                        "scenario {w}: PV potential for '{}' has {} steps, expected {}",
                        r.name,
                        series.len(),
                        scenarios.steps
                    )))
                }
                Some(_) => {}
            }
        }
    }
    for r in &resources.resources {
        if network.injection_index(r.bus()).is_none() {
            return Err(DayAheadError::Input(format!(
                "resource '{}' sits on bus {}, which is not a non-slack bus of the network",
                r.name,
                r.bus()
            )));
        }
    }
    Ok(())
}

pub fn build_dayahead(
    network: &NetworkModel,
    resources: &ResourceSet,
    scenarios: &ScenarioSet,
    lins: &[Vec<LinearGridModel>],
    config: &DayAheadConfig,
) -> Result<BuiltDayAhead, DayAheadError> {
    config.validate(resources)?;
    validate_scenarios(network, resources, scenarios)?;
    let steps = scenarios.steps;
    let num_scenarios = scenarios.scenarios.len();
    if lins.len() != num_scenarios || lins.iter().any(|per_t| per_t.len() != steps) {
        return Err(DayAheadError::Input(format!(
            "linearized models shaped {:?} do not match {num_scenarios} scenarios × {steps} steps",
            (lins.len(), lins.first().map_or(0, Vec::len))
        )));
    }
    if let Some(lim) = &config.limits {
        if lim.i_max_pu.len() != network.num_lines() {
            return Err(DayAheadError::Input(format!(
                "{} ampacity limits for a network with {} lines",
                lim.i_max_pu.len(),
                network.num_lines()
            )));
        }
    }
    let s_base_kw = network.base.s_base_va / 1e3;
    let m = network.non_slack().len();
    let cols: Vec<ResourceCols> = resources
        .resources
        .iter()
        .map(|r| {
            // Presence validated above.
            let k = network.injection_index(r.bus()).expect("validated");
            ResourceCols { p: k, q: m + k }
        })
        .collect();
    let lambdas: Vec<f64> = resources
        .resources
        .iter()
        .map(|r| {
            config
                .lambda
                .get(&r.name)
                .copied()
                .unwrap_or(config.lambda_default)
        })
        .collect();
    // Worst-case |(p, q)| each resource can contribute, for pruning grid rows
    // that provably cannot bind.
    let reaches: Vec<[f64; 2]> = resources
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

    let layout = Layout::new(resources, steps, num_scenarios);
    let mut prob = ConvexProblem::new(layout.num_vars());
    let w_scn = 1.0 / num_scenarios as f64;
    let tan = config.pf.tan_theta_m();

    // Resource feasible sets and usage costs, one whole-day block per (ω, r).
    for (w, sc) in scenarios.scenarios.iter().enumerate() {
        for (r_idx, r) in resources.resources.iter().enumerate() {
            match &r.kind {
                ResourceKind::Battery {
                    params,
                    initial_soe_kwh,
                } => {
                    let vars = layout.battery_vars(w, r_idx);
                    let blocks = battery_dayahead_blocks(params, *initial_soe_kwh, steps)?;
                    blocks.add_cost(&mut prob, &vars, w_scn * lambdas[r_idx]);
                    blocks.add_constraints(&mut prob, &vars);
                }
                ResourceKind::Pv(params) => {
                    let vars = layout.pv_vars(w, r_idx);
                    let potential = PvPotential::new(sc.pv_potential_kw[&r.name].clone())?;
                    pv_cost_block(&mut prob, &vars, &potential, w_scn * lambdas[r_idx]);
                    pv_constraint_block(&mut prob, &vars, params, &potential);
                }
            }
        }
    }

    // Grid coupling per (t, ω).
    let mut grid_rows_kept = 0usize;
    let mut grid_rows_dropped = 0usize;
    let mut terms: Vec<(usize, f64)> = Vec::with_capacity(2 * resources.len() + 3);
    for t in 0..steps {
        for (w, sc) in scenarios.scenarios.iter().enumerate() {
            let lgm = &lins[w][t];
            let unc = uncontrollable_injection(network, sc, t)?;
            let g = gcp_terms(lgm, &unc, &cols, s_base_kw);
            let (p0p, p0m) = (layout.p0_plus(t, w), layout.p0_minus(t, w));

            // Split equality p₀⁺ − p₀⁻ − p₀(x) = const.
            terms.clear();
            terms.push((p0p, 1.0));
            terms.push((p0m, -1.0));
            for (r_idx, d) in g.dp.iter().enumerate() {
                let (vp, vq) = layout.pq_of(t, w, r_idx);
                terms.push((vp, -d[0]));
                terms.push((vq, -d[1]));
            }
            prob.push_eq(&terms, g.const_p_kw);
            prob.set_lower(p0p, 0.0);
            prob.set_lower(p0m, 0.0);
            prob.add_quadratic(p0p, p0p, w_scn * config.pf.nu);
            prob.add_quadratic(p0m, p0m, w_scn * config.pf.nu);

            // Power-factor cone: ±q₀(x) ≤ tan θ_m (p₀⁺ + p₀⁻).
            for sign in [1.0, -1.0] {
                terms.clear();
                for (r_idx, d) in g.dq.iter().enumerate() {
                    let (vp, vq) = layout.pq_of(t, w, r_idx);
                    terms.push((vp, sign * d[0]));
                    terms.push((vq, sign * d[1]));
                }
                terms.push((p0p, -tan));
                terms.push((p0m, -tan));
                prob.push_ineq(&terms, -sign * g.const_q_kw);
            }

            // Deviation from the dispatch pair, scenario-averaged.
            prob.add_square(
                w_scn,
                &[(p0p, 1.0), (p0m, -1.0), (layout.p_disp(t), -1.0)],
                0.0,
            );
            if config.deviation == DeviationMode::Complex {
                terms.clear();
                for (r_idx, d) in g.dq.iter().enumerate() {
                    let (vp, vq) = layout.pq_of(t, w, r_idx);
                    terms.push((vp, d[0]));
                    terms.push((vq, d[1]));
                }
                terms.push((layout.q_disp(t), -1.0));
                prob.add_square(w_scn, &terms, g.const_q_kw);
            }

            // Voltage band and ampacity through the affine model.
            if let Some(lim) = &config.limits {
                let rows = limit_rows(lgm, &unc, &cols, &reaches, lim, s_base_kw).map_err(
                    |msg| {
                        DayAheadError::Input(format!("at step {t}, scenario {w}: {msg}"))
                    },
                )?;
                let mut terms: Vec<(usize, f64)> = Vec::with_capacity(2 * cols.len());
                for row in &rows.rows {
                    terms.clear();
                    for (r_idx, c) in row.coefs.iter().enumerate() {
                        let (vp, vq) = layout.pq_of(t, w, r_idx);
                        terms.push((vp, c[0]));
                        terms.push((vq, c[1]));
                    }
                    prob.push_ineq(&terms, row.rhs);
                }
                grid_rows_kept += rows.rows.len();
                grid_rows_dropped += rows.dropped;
            }
        }
    }

    Ok(BuiltDayAhead {
        problem: prob,
        layout,
        grid_rows_kept,
        grid_rows_dropped,
    })
}

// ---------------------------------------------------------------------------
// solve + extraction

/// Predicted operation of every resource and of the GCP under one scenario.
#[derive(Debug, Clone)]
pub struct ScenarioTrajectory {
    pub p0_kw: Vec<f64>,
    pub q0_kw: Vec<f64>,
    pub battery_p_kw: BTreeMap<String, Vec<f64>>,
    pub battery_q_kvar: BTreeMap<String, Vec<f64>>,
    pub battery_soe_kwh: BTreeMap<String, Vec<f64>>,
    pub pv_p_kw: BTreeMap<String, Vec<f64>>,
    pub pv_q_kvar: BTreeMap<String, Vec<f64>>,
    /// max over steps of p₀⁺ · p₀⁻ — zero means a mutually exclusive split.
    pub split_product_max_kw2: f64,
}

#[derive(Debug, Clone)]
pub struct DayAheadSolution {
    pub plan: DispatchPlan,
    pub per_scenario: Vec<ScenarioTrajectory>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_max: f64,
    pub split_product_max_kw2: f64,
    pub grid_rows_kept: usize,
    pub grid_rows_dropped: usize,
    pub solve_seconds: f64,
}

pub fn solve_dayahead(
    network: &NetworkModel,
    resources: &ResourceSet,
    scenarios: &ScenarioSet,
    config: &DayAheadConfig,
) -> Result<DayAheadSolution, DayAheadError> {
    let started = Instant::now();
    let lins = linearize_scenarios(network, resources, scenarios)?;
    let built = build_dayahead(network, resources, scenarios, &lins, config)?;
    let sol = solve(&built.problem, &config.solver)?;
    if sol.status != SolverStatus::Optimal {
        return Err(DayAheadError::NotOptimal {
            status: sol.status,
            iterations: sol.iterations,
            kkt_max: sol.kkt.max(),
        });
    }
    extract_solution(
        network,
        resources,
        scenarios,
        &lins,
        config,
        &built,
        &sol,
        started.elapsed().as_secs_f64(),
    )
}

#[allow(clippy::too_many_arguments)]
fn extract_solution(
    network: &NetworkModel,
    resources: &ResourceSet,
    scenarios: &ScenarioSet,
    lins: &[Vec<LinearGridModel>],
    config: &DayAheadConfig,
    built: &BuiltDayAhead,
    sol: &SolverSolution,
    solve_seconds: f64,
) -> Result<DayAheadSolution, DayAheadError> {
    let layout = &built.layout;
    let x = &sol.x;
    let steps = layout.steps;
    let s_base_kw = network.base.s_base_va / 1e3;
    let m = network.non_slack().len();
    let cols: Vec<ResourceCols> = resources
        .resources
        .iter()
        .map(|r| {
            let k = network.injection_index(r.bus()).expect("validated");
            ResourceCols { p: k, q: m + k }
        })
        .collect();

    let mut per_scenario = Vec::with_capacity(layout.num_scenarios);
    let mut split_product_max = 0.0f64;
    for (w, sc) in scenarios.scenarios.iter().enumerate() {
        let mut tr = ScenarioTrajectory {
            p0_kw: Vec::with_capacity(steps),
            q0_kw: Vec::with_capacity(steps),
            battery_p_kw: BTreeMap::new(),
            battery_q_kvar: BTreeMap::new(),
            battery_soe_kwh: BTreeMap::new(),
            pv_p_kw: BTreeMap::new(),
            pv_q_kvar: BTreeMap::new(),
            split_product_max_kw2: 0.0,
        };
        for (r_idx, r) in resources.resources.iter().enumerate() {
            match &r.kind {
                ResourceKind::Battery { params, .. } => {
                    let vars = layout.battery_vars(w, r_idx);
                    let k = params.kwh_per_kw();
                    tr.battery_p_kw
                        .insert(r.name.clone(), vars.p.iter().map(|&i| x[i]).collect());
                    tr.battery_q_kvar
                        .insert(r.name.clone(), vars.q.iter().map(|&i| x[i]).collect());
                    tr.battery_soe_kwh
                        .insert(r.name.clone(), vars.soe.iter().map(|&i| x[i] * k).collect());
                }
                ResourceKind::Pv(_) => {
                    let vars = layout.pv_vars(w, r_idx);
                    tr.pv_p_kw
                        .insert(r.name.clone(), vars.p.iter().map(|&i| x[i]).collect());
                    tr.pv_q_kvar
                        .insert(r.name.clone(), vars.q.iter().map(|&i| x[i]).collect());
                }
            }
        }
        for t in 0..steps {
            let unc = uncontrollable_injection(network, sc, t)?;
            let g = gcp_terms(&lins[w][t], &unc, &cols, s_base_kw);
            let (p0p, p0m) = (x[layout.p0_plus(t, w)], x[layout.p0_minus(t, w)]);
            tr.p0_kw.push(p0p - p0m);
            let mut q0 = g.const_q_kw;
            for (r_idx, d) in g.dq.iter().enumerate() {
                let (vp, vq) = layout.pq_of(t, w, r_idx);
                q0 += d[0] * x[vp] + d[1] * x[vq];
            }
            tr.q0_kw.push(q0);
            tr.split_product_max_kw2 = tr.split_product_max_kw2.max(p0p * p0m);
        }
        split_product_max = split_product_max.max(tr.split_product_max_kw2);
        per_scenario.push(tr);
    }

    let p_disp_kw: Vec<f64> = (0..steps).map(|t| x[layout.p_disp(t)]).collect();
    let q_disp_kvar: Vec<f64> = match config.deviation {
        DeviationMode::Complex => (0..steps).map(|t| x[layout.q_disp(t)]).collect(),
        // Without a reactive deviation term the q-dispatch variable carries
        // no information; report the scenario-mean prediction instead.
        DeviationMode::RealOnly => (0..steps)
            .map(|t| {
                per_scenario.iter().map(|tr| tr.q0_kw[t]).sum::<f64>()
                    / per_scenario.len() as f64
            })
            .collect(),
    };
    let plan = DispatchPlan {
        start_utc: config.start_utc,
        step_s: config.step_s,
        p_disp_kw,
        q_disp_kvar,
    };
    plan.validate()?;
    Ok(DayAheadSolution {
        plan,
        per_scenario,
        objective: sol.objective,
        iterations: sol.iterations,
        kkt_max: sol.kkt.max(),
        split_product_max_kw2: split_product_max,
        grid_rows_kept: built.grid_rows_kept,
        grid_rows_dropped: built.grid_rows_dropped,
        solve_seconds,
    })
}

// ---------------------------------------------------------------------------
// plan reliability

/// Below this mean plan magnitude the percentage normalization is dropped
/// (a near-zero-mean plan would blow the ratio up without meaning anything).
pub const MRMSE_NORMALIZATION_FLOOR_KW: f64 = 1.0;

/// Scenario-averaged tracking error of a dispatch plan.
#[derive(Debug, Clone)]
pub struct PlanReliability {
    pub per_scenario_rmse_kw: Vec<f64>,
    pub mean_rmse_kw: f64,
    pub mean_plan_kw: f64,
    /// `mean_rmse / |mean plan| × 100`; `None` when the mean plan magnitude
    /// is under [`MRMSE_NORMALIZATION_FLOOR_KW`] — compare `mean_rmse_kw`
    /// directly in that case.
    pub percent: Option<f64>,
}

/// Mean over scenarios of the RMSE between the planned active dispatch and
/// each scenario's realized (or predicted) GCP power, normalized by the mean
/// plan magnitude.
pub fn plan_reliability_mrmse(
    plan_p_kw: &[f64],
    realized_p_kw: &[Vec<f64>],
) -> Result<PlanReliability, DayAheadError> {
    if plan_p_kw.is_empty() {
        return Err(DayAheadError::Input("empty plan".into()));
    }
    if realized_p_kw.is_empty() {
        return Err(DayAheadError::Input("no realized trajectories".into()));
    }
    let n = plan_p_kw.len();
    let mut per_scenario_rmse_kw = Vec::with_capacity(realized_p_kw.len());
    for (w, series) in realized_p_kw.iter().enumerate() {
        if series.len() != n {
            return Err(DayAheadError::Input(format!(
                "trajectory {w} has {} steps, plan has {n}",
                series.len()
            )));
        }
        let mse = series
            .iter()
            .zip(plan_p_kw)
            .map(|(r, p)| (r - p) * (r - p))
            .sum::<f64>()
            / n as f64;
        per_scenario_rmse_kw.push(mse.sqrt());
    }
    let mean_rmse_kw =
        per_scenario_rmse_kw.iter().sum::<f64>() / per_scenario_rmse_kw.len() as f64;
    let mean_plan_kw = plan_p_kw.iter().sum::<f64>() / n as f64;
    let percent = (mean_plan_kw.abs() >= MRMSE_NORMALIZATION_FLOOR_KW)
        .then(|| 100.0 * mean_rmse_kw / mean_plan_kw.abs());
    Ok(PlanReliability {
        per_scenario_rmse_kw,
        mean_rmse_kw,
        mean_plan_kw,
        percent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{enumerate_optimum, OracleOptions};
    use crate::resources::{BatteryParams, Resource};
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;

    fn two_bus(r_ohm: f64, x_ohm: f64) -> NetworkModel {
        NetworkModel::from_str_contents(&format!(
            "[base]\nv_base_v = 400.0\ns_base_va = 100000.0\nslack_v_pu = 1.0\n\
             [buses]\n1 slack\n2 pq\n[lines]\n1 2 {r_ohm} {x_ohm} 250.0\n"
        ))
        .unwrap()
    }

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2025, 6, d).unwrap()
    }

    fn demand_scenario(p: Vec<f64>, q: Vec<f64>) -> Scenario {
        Scenario {
            demand_p_kw: BTreeMap::from([(2u32, p)]),
            demand_q_kvar: BTreeMap::from([(2u32, q)]),
            pv_potential_kw: BTreeMap::new(),
            pv_day: day(1),
            demand_day: day(1),
        }
    }

    fn sset(scenarios: Vec<Scenario>) -> ScenarioSet {
        let steps = scenarios[0].demand_p_kw.values().next().unwrap().len();
        ScenarioSet { scenarios, steps }
    }

    fn battery(capacity_kwh: f64, s_max_kva: f64, initial_soe_kwh: f64) -> Resource {
        Resource {
            name: "bess".into(),
            kind: ResourceKind::Battery {
                params: BatteryParams {
                    bus: 2,
                    capacity_kwh,
                    s_max_kva,
                    backoff: 0.0,
                    t_s_s: 30.0,
                    efficiency: 1.0,
                },
                initial_soe_kwh,
            },
        }
    }

    /// Small-problem config: the tight default solver profile instead of the
    /// loose large-scale one.
    fn toy_config() -> DayAheadConfig {
        DayAheadConfig {
            solver: SolveOptions::default(),
            ..DayAheadConfig::default()
        }
    }

    #[test]
    fn plan_tracks_net_injection_without_controllables() {
        // Near-lossless feeder, no resources: the dispatch plan can only be
        // the net uncontrollable injection itself.  2e-5 Ω keeps losses below
        // the 1e-4 kW tolerance while staying well above the power-flow
        // oracle's numerical mismatch floor (which scales with admittance).
        let net = two_bus(2e-5, 2e-5);
        let res = ResourceSet::new(vec![]).unwrap();
        let p = vec![-10.0, -12.0, -8.0, -11.0, -9.0];
        let q: Vec<f64> = p.iter().map(|v| 0.3 * v).collect();
        let scn = sset(vec![demand_scenario(p.clone(), q.clone())]);
        let sol = solve_dayahead(&net, &res, &scn, &toy_config()).unwrap();
        for t in 0..p.len() {
            assert_abs_diff_eq!(sol.plan.p_disp_kw[t], p[t], epsilon = 1e-4);
            assert_abs_diff_eq!(sol.plan.q_disp_kvar[t], q[t], epsilon = 1e-4);
            assert_abs_diff_eq!(sol.per_scenario[0].p0_kw[t], p[t], epsilon = 1e-4);
        }
        assert!(sol.split_product_max_kw2 <= 1e-6);
    }

    #[test]
    fn symmetric_scenarios_cancel_through_battery() {
        // Two mirror-image net-demand scenarios and a battery with plenty of
        // room: the optimal shared plan is zero, the battery absorbs ±d.
        let net = two_bus(2e-5, 2e-5);
        let res = ResourceSet::new(vec![battery(1000.0, 50.0, 500.0)]).unwrap();
        let d = 8.0;
        let scn = sset(vec![
            demand_scenario(vec![-d; 4], vec![0.0; 4]),
            demand_scenario(vec![d; 4], vec![0.0; 4]),
        ]);
        let mut config = toy_config();
        config.lambda.insert("bess".into(), 0.0);
        let sol = solve_dayahead(&net, &res, &scn, &config).unwrap();
        for t in 0..4 {
            assert!(
                sol.plan.p_disp_kw[t].abs() < 1e-3,
                "plan[{t}] = {}",
                sol.plan.p_disp_kw[t]
            );
            assert_abs_diff_eq!(
                sol.per_scenario[0].battery_p_kw["bess"][t],
                d,
                epsilon = 1e-3
            );
            assert_abs_diff_eq!(
                sol.per_scenario[1].battery_p_kw["bess"][t],
                -d,
                epsilon = 1e-3
            );
        }
    }

    #[test]
    fn three_step_tight_battery_matches_enumeration_oracle() {
        // Lossy feeder and a battery whose SOE band is tight enough to bind:
        // the splitting solver must land on the exhaustive active-set
        // optimum.  The rating is infinite so the face budget of the oracle
        // (18: 6 SOE bounds, 6 split positivity bounds, 6 cone rows) is met.
        let net = two_bus(0.5, 0.3);
        let res = ResourceSet::new(vec![battery(0.05, f64::INFINITY, 0.025)]).unwrap();
        let p = vec![-15.0, -5.0, -10.0];
        let q: Vec<f64> = p.iter().map(|v| 0.2 * v).collect();
        let scn = sset(vec![demand_scenario(p, q)]);
        let mut config = toy_config();
        config.lambda.insert("bess".into(), 0.01);
        config.pf.nu = 0.05;

        let lins = linearize_scenarios(&net, &res, &scn).unwrap();
        let built = build_dayahead(&net, &res, &scn, &lins, &config).unwrap();
        let sol = solve(&built.problem, &config.solver).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        let oracle =
            enumerate_optimum(&built.problem, &OracleOptions::default()).expect("oracle candidate");
        assert_abs_diff_eq!(sol.objective, oracle.objective, epsilon = 1e-5);

        let vars = built.layout.battery_vars(0, 0);
        for t in 0..3 {
            assert_abs_diff_eq!(sol.x[vars.p[t]], oracle.x[vars.p[t]], epsilon = 1e-4);
            assert_abs_diff_eq!(
                sol.x[built.layout.p_disp(t)],
                oracle.x[built.layout.p_disp(t)],
                epsilon = 1e-4
            );
        }
        // The battery is actually exercised.
        let max_p = vars.p.iter().map(|&i| sol.x[i].abs()).fold(0.0, f64::max);
        assert!(max_p > 1.0, "battery unused, max |p| = {max_p}");
    }

    #[test]
    fn scenario_permutation_leaves_plan_invariant() {
        let net = two_bus(0.4, 0.25);
        let res = ResourceSet::new(vec![battery(2.0, 20.0, 1.0)]).unwrap();
        let s1 = demand_scenario(vec![-12.0, -6.0, -9.0], vec![-3.0, -1.5, -2.25]);
        let s2 = demand_scenario(vec![-4.0, -10.0, -7.0], vec![-1.0, -2.5, -1.75]);
        let config = toy_config();
        let a = solve_dayahead(&net, &res, &sset(vec![s1.clone(), s2.clone()]), &config).unwrap();
        let b = solve_dayahead(&net, &res, &sset(vec![s2, s1]), &config).unwrap();
        assert!(a.kkt_max < 1e-6, "kkt {:.3e}", a.kkt_max);
        assert!(b.kkt_max < 1e-6, "kkt {:.3e}", b.kkt_max);
        for t in 0..3 {
            assert_abs_diff_eq!(a.plan.p_disp_kw[t], b.plan.p_disp_kw[t], epsilon = 1e-6);
            assert_abs_diff_eq!(a.plan.q_disp_kvar[t], b.plan.q_disp_kvar[t], epsilon = 1e-6);
            assert_abs_diff_eq!(
                a.per_scenario[0].battery_p_kw["bess"][t],
                b.per_scenario[1].battery_p_kw["bess"][t],
                epsilon = 1e-5
            );
            assert_abs_diff_eq!(
                a.per_scenario[1].battery_p_kw["bess"][t],
                b.per_scenario[0].battery_p_kw["bess"][t],
                epsilon = 1e-5
            );
        }
    }

    #[test]
    fn split_is_mutually_exclusive_when_cone_is_slack() {
        // Sign-flipping net power exercises both sides of the split.
        let net = two_bus(0.5, 0.3);
        let res = ResourceSet::new(vec![]).unwrap();
        let p = vec![-10.0, 10.0, -10.0, 10.0];
        let q: Vec<f64> = p.iter().map(|v| 0.15 * v).collect();
        let scn = sset(vec![demand_scenario(p, q)]);
        for nu in [10.0, 1e-3] {
            let mut config = toy_config();
            config.pf.nu = nu;
            let sol = solve_dayahead(&net, &res, &scn, &config).unwrap();
            assert!(
                sol.split_product_max_kw2 <= 1e-6,
                "nu = {nu}: max split product {:.3e}",
                sol.split_product_max_kw2
            );
        }
    }

    #[test]
    fn pf_cone_enforced_with_battery_reactive_support() {
        // Demand at power factor 0.8 — far below the 0.95 floor — forces the
        // battery to carry reactive power so the GCP stays inside the cone.
        let net = two_bus(0.5, 0.3);
        let res = ResourceSet::new(vec![battery(5.0, 20.0, 2.5)]).unwrap();
        let scn = sset(vec![demand_scenario(
            vec![-10.0; 3],
            vec![-7.5; 3],
        )]);
        let config = toy_config();
        let sol = solve_dayahead(&net, &res, &scn, &config).unwrap();
        assert!(sol.split_product_max_kw2 <= 1e-6);
        let tr = &sol.per_scenario[0];
        let tan = config.pf.tan_theta_m();
        for t in 0..3 {
            let (p0, q0) = (tr.p0_kw[t], tr.q0_kw[t]);
            assert!(
                q0.abs() <= tan * p0.abs() + 1e-5,
                "step {t}: q0 = {q0}, p0 = {p0}"
            );
            let pf = p0.abs() / p0.hypot(q0);
            assert!(pf >= 0.95 - 1e-6, "step {t}: power factor {pf}");
        }
    }

    #[test]
    fn unity_pf_requirement_pins_reactive_exchange() {
        let net = two_bus(0.5, 0.3);
        let res = ResourceSet::new(vec![battery(5.0, 20.0, 2.5)]).unwrap();
        let scn = sset(vec![demand_scenario(vec![-8.0; 3], vec![-3.0; 3])]);
        let mut config = toy_config();
        config.pf.cos_theta_min = 1.0;
        let sol = solve_dayahead(&net, &res, &scn, &config).unwrap();
        for t in 0..3 {
            assert!(
                sol.per_scenario[0].q0_kw[t].abs() < 1e-5,
                "q0[{t}] = {}",
                sol.per_scenario[0].q0_kw[t]
            );
        }
    }

    #[test]
    fn weak_feeder_voltage_rows_force_battery_support() {
        // On a soft feeder the uncontrolled voltage sags below the band; the
        // scheduler must dispatch the battery until the linearized voltage
        // clears the floor.
        let net = two_bus(0.8, 0.6);
        let res = ResourceSet::new(vec![battery(100.0, 30.0, 50.0)]).unwrap();
        let scn = sset(vec![demand_scenario(vec![-20.0; 4], vec![-2.0; 4])]);
        let mut config = toy_config();
        config.limits = Some(GridLimits::from_network(&net, 0.95, 1.05));
        let lins = linearize_scenarios(&net, &res, &scn).unwrap();
        let sol = solve_dayahead(&net, &res, &scn, &config).unwrap();
        // Both voltage rows stay (the band is within the battery's reach),
        // the ampacity row is provably slack.
        assert_eq!(sol.grid_rows_kept, 8);
        assert_eq!(sol.grid_rows_dropped, 4);
        let tr = &sol.per_scenario[0];
        for t in 0..4 {
            let (bp, bq) = (tr.battery_p_kw["bess"][t], tr.battery_q_kvar["bess"][t]);
            assert!(bp.hypot(bq) > 5.0, "battery idle at step {t}");
            let mut inj = InjectionVector::zeros(&net);
            inj.add_kw(&net, 2, -20.0 + bp, -2.0 + bq).unwrap();
            let st = lins[0][t].predict_state(&inj).unwrap();
            assert!(
                st.v_pu[0] >= 0.95 - 1e-5,
                "step {t}: linearized voltage {}",
                st.v_pu[0]
            );
        }
    }

    #[test]
    fn presolve_drops_rows_no_resource_can_bind() {
        // Stiff feeder, small battery: every voltage/ampacity row is slack by
        // more than the battery's worst-case reach and must be pruned.
        let net = two_bus(0.01, 0.01);
        let res = ResourceSet::new(vec![battery(10.0, 5.0, 5.0)]).unwrap();
        let scn = sset(vec![demand_scenario(vec![-2.0; 3], vec![-0.5; 3])]);
        let mut config = toy_config();
        config.limits = Some(GridLimits::from_network(&net, 0.95, 1.05));
        let sol = solve_dayahead(&net, &res, &scn, &config).unwrap();
        assert_eq!(sol.grid_rows_kept, 0);
        assert_eq!(sol.grid_rows_dropped, 9);
    }

    #[test]
    fn battery_step_mismatch_rejected() {
        let net = two_bus(0.1, 0.1);
        let mut bat = battery(10.0, 5.0, 5.0);
        if let ResourceKind::Battery { params, .. } = &mut bat.kind {
            params.t_s_s = 60.0;
        }
        let res = ResourceSet::new(vec![bat]).unwrap();
        let scn = sset(vec![demand_scenario(vec![-2.0; 2], vec![0.0; 2])]);
        match solve_dayahead(&net, &res, &scn, &toy_config()) {
            Err(DayAheadError::Input(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected step mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_pv_potential_rejected() {
        let net = two_bus(0.1, 0.1);
        let res = ResourceSet::new(vec![Resource {
            name: "pv1".into(),
            kind: ResourceKind::Pv(crate::resources::PvParams {
                bus: 2,
                s_max_kva: 10.0,
                reactive_capable: false,
            }),
        }])
        .unwrap();
        let scn = sset(vec![demand_scenario(vec![-2.0; 2], vec![0.0; 2])]);
        match solve_dayahead(&net, &res, &scn, &toy_config()) {
            Err(DayAheadError::Input(msg)) => assert!(msg.contains("pv1"), "{msg}"),
            other => panic!("expected missing potential, got {other:?}"),
        }
    }

    #[test]
    fn linearization_reuses_nothing_across_differing_steps() {
        // A constant scenario produces bit-identical models at every step; a
        // one-step perturbation changes exactly that step's model.
        let net = two_bus(0.3, 0.2);
        let res = ResourceSet::new(vec![]).unwrap();
        let constant = demand_scenario(vec![-10.0; 4], vec![-3.0; 4]);
        let mut bumped_p = vec![-10.0; 4];
        bumped_p[2] = -30.0;
        let bumped = demand_scenario(bumped_p, vec![-3.0; 4]);
        let lins = linearize_scenarios(&net, &res, &sset(vec![constant, bumped])).unwrap();
        for t in 1..4 {
            assert_eq!(lins[0][t].b_v[0], lins[0][0].b_v[0]);
            assert_eq!(lins[0][t].a_v[(0, 0)], lins[0][0].a_v[(0, 0)]);
            assert_eq!(lins[0][t].a_l[(0, 0)], lins[0][0].a_l[(0, 0)]);
        }
        assert_ne!(lins[1][2].b_v[0], lins[1][0].b_v[0]);
        for t in [0usize, 1, 3] {
            assert_eq!(lins[1][t].b_v[0], lins[1][0].b_v[0]);
        }
    }

    #[test]
    fn reliability_metric_normalizes_by_mean_plan() {
        let plan = vec![10.0; 6];
        let realized = vec![vec![11.0; 6], vec![9.0; 6]];
        let rel = plan_reliability_mrmse(&plan, &realized).unwrap();
        assert_abs_diff_eq!(rel.per_scenario_rmse_kw[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rel.per_scenario_rmse_kw[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rel.percent.unwrap(), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn reliability_metric_falls_back_below_normalization_floor() {
        let plan = vec![5.0, -5.0, 5.0, -5.0];
        let realized = vec![vec![5.5, -4.5, 5.5, -4.5]];
        let rel = plan_reliability_mrmse(&plan, &realized).unwrap();
        assert!(rel.percent.is_none());
        assert_abs_diff_eq!(rel.mean_rmse_kw, 0.5, epsilon = 1e-12);
        assert!(plan_reliability_mrmse(&plan, &[vec![1.0; 3]]).is_err());
    }
}
