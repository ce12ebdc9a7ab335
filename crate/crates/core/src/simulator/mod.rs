//! Closed-loop simulation: replay a realized day against a dispatch plan,
//! with the tracking controller in the loop and a full AC power flow as the
//! ground-truth plant model.
//!
//! Per interval the simulator (1) builds persistence forecasts from the
//! measurements accumulated so far, (2) refreshes the linearized grid model at
//! the last realized operating point, (3) solves the tracking problem over a
//! receding horizon, (4) actuates the first-interval setpoints — clipping PV
//! commands to the realized potential — and (5) advances the plant through the
//! AC oracle.  All realized grid quantities in the trace come from the oracle,
//! never from the controller's linear model.

mod agents;
mod trace_file;

pub use agents::{run_agents, AgentOptions, AgentOutcome, StepTimings};
pub use trace_file::{load_trace, save_trace, trace_from_str, trace_to_string};

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::day_ahead::{
    plan_reliability_mrmse, solve_dayahead, DayAheadConfig, DayAheadError, DispatchPlan, PfLimit,
    PlanReliability, MRMSE_NORMALIZATION_FLOOR_KW,
};
use crate::forecasting::{persistence_forecast, ForecastError, HistoricalDay, ScenarioSet};
use crate::grid::{
    audit_constraints, compute_sensitivities, solve_power_flow, AuditMode, AuditReport, GridError,
    GridLimits, InjectionVector, NetworkModel, PowerFlowOptions, PowerFlowSolution,
};
use crate::qp::{SolveError, SolveOptions};
use crate::realtime_mpc::{
    run_admm, solve_centralized, AdmmState, AdmmTolerances, Horizon, PenaltyPolicy, RtError,
    StepContext,
};
use crate::resources::{
    battery_soe_step, check_capability, BatteryState, Resource, ResourceError, ResourceKind,
    ResourceSet, ResourceSetpoint,
};

/// Setpoint overshoots beyond solver tolerance are logged when the actuation
/// projection has to correct by more than this much apparent power (kVA).
const ACTUATION_SLACK_KVA: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Controller(#[from] RtError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Schedule(#[from] DayAheadError),
    #[error("inconsistent simulation inputs: {0}")]
    Input(String),
    #[error("failed to access {path}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The plant model failed mid-run; the trace up to (excluding) `step`
    /// is preserved so partial results can still be written out.
    #[error("simulation aborted at step {step}: {reason}")]
    Aborted {
        step: usize,
        reason: String,
        partial: Box<SimulationTrace>,
    },
}

/// Which tracking controller closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// One tracking problem over the whole fleet, solved directly.
    Centralized,
    /// Consensus iteration between per-resource agents and the grid
    /// aggregator; produces the same setpoints as [`ControlMode::Centralized`]
    /// up to the consensus tolerance.
    Distributed,
}

impl ControlMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::Centralized => "centralized",
            ControlMode::Distributed => "distributed",
        }
    }
}

/// Broad resource class, fixing which per-resource columns a trace carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceClass {
    Battery,
    Pv,
}

impl ResourceClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResourceClass::Battery => "battery",
            ResourceClass::Pv => "pv",
        }
    }

    fn of(kind: &ResourceKind) -> Self {
        match kind {
            ResourceKind::Battery { .. } => ResourceClass::Battery,
            ResourceKind::Pv(_) => ResourceClass::Pv,
        }
    }
}

/// What actually happened on the feeder during one day: demand per load bus
/// and available PV power per plant, one sample per control interval.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationData {
    /// Label of the day (used in file names and reports).
    pub day_id: String,
    pub demand_p_kw: BTreeMap<u32, Vec<f64>>,
    pub demand_q_kvar: BTreeMap<u32, Vec<f64>>,
    /// Maximum available (not curtailed) PV power per plant; never negative.
    pub pv_potential_kw: BTreeMap<String, Vec<f64>>,
}

impl RealizationData {
    /// Reuses a historical-day record as a realization (its hourly
    /// predictions are simply ignored).
    pub fn from_day(day_id: impl Into<String>, day: &HistoricalDay) -> Self {
        RealizationData {
            day_id: day_id.into(),
            demand_p_kw: day.demand_p_kw.clone(),
            demand_q_kvar: day.demand_q_kvar.clone(),
            pv_potential_kw: day.pv_potential_kw.clone(),
        }
    }

    /// Checks internal consistency and compatibility with the feeder and the
    /// fleet; returns the number of steps.
    pub fn validate(
        &self,
        network: &NetworkModel,
        resources: &ResourceSet,
    ) -> Result<usize, SimError> {
        let mut steps: Option<usize> = None;
        let mut check_len = |name: &str, len: usize| -> Result<(), SimError> {
            match steps {
                None => {
                    steps = Some(len);
                    Ok(())
                }
                Some(s) if s == len => Ok(()),
                Some(s) => Err(SimError::Input(format!(
                    "series {name} has {len} steps, expected {s}"
                ))),
            }
        };
        for (bus, series) in &self.demand_p_kw {
            check_len(&format!("demand p at bus {bus}"), series.len())?;
            if network.injection_index(*bus).is_none() {
                return Err(SimError::Input(format!(
                    "demand bus {bus} is not a non-slack bus of the network"
                )));
            }
            if series.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Input(format!(
                    "demand p at bus {bus} contains a non-finite sample"
                )));
            }
        }
        for (bus, series) in &self.demand_q_kvar {
            check_len(&format!("demand q at bus {bus}"), series.len())?;
            if !self.demand_p_kw.contains_key(bus) {
                return Err(SimError::Input(format!(
                    "demand q given for bus {bus} without a matching p series"
                )));
            }
            if series.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Input(format!(
                    "demand q at bus {bus} contains a non-finite sample"
                )));
            }
        }
        for bus in self.demand_p_kw.keys() {
            if !self.demand_q_kvar.contains_key(bus) {
                return Err(SimError::Input(format!(
                    "demand p given for bus {bus} without a matching q series"
                )));
            }
        }
        for (plant, series) in &self.pv_potential_kw {
            check_len(&format!("potential of plant {plant}"), series.len())?;
            if series.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(SimError::Input(format!(
                    "potential of plant {plant} has a negative or non-finite sample"
                )));
            }
        }
        for (r, _) in resources.pvs() {
            if !self.pv_potential_kw.contains_key(&r.name) {
                return Err(SimError::Input(format!(
                    "realization has no potential series for plant {}",
                    r.name
                )));
            }
        }
        let steps = steps
            .ok_or_else(|| SimError::Input("realization contains no series".into()))?;
        if steps == 0 {
            return Err(SimError::Input("realization has zero steps".into()));
        }
        Ok(steps)
    }
}

/// Everything the simulator logged about one control interval.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub plan_p_kw: f64,
    pub plan_q_kvar: f64,
    /// Feeder exchange realized by the AC oracle (export-positive).
    pub realized_p_kw: f64,
    pub realized_q_kvar: f64,
    /// Counterfactual feeder exchange with every PV at its potential and
    /// every battery idle, from the same oracle.
    pub uncontrolled_p_kw: f64,
    /// What the controller commanded.
    pub setpoints: BTreeMap<String, ResourceSetpoint>,
    /// What the plant realized after clipping to the available potential.
    pub injections: BTreeMap<String, ResourceSetpoint>,
    /// Stored energy per battery after this interval.
    pub soe_kwh: BTreeMap<String, f64>,
    /// Potential minus realized injection per plant; positive when spilled.
    pub curtailment_kw: BTreeMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
    pub soft_tracking: bool,
    /// Controller wall time for this interval (model refresh + solve).
    pub solve_seconds: f64,
    /// Margins of the realized state against the audit limits; `+∞` when no
    /// limits were configured.  Negative means a violation.
    pub v_low_margin_pu: f64,
    pub v_high_margin_pu: f64,
    pub ampacity_margin_pu: f64,
}

/// Per-resource subproblem timings collected by the threaded consensus
/// harness, for studying how the per-interval compute load scales with the
/// fleet.  Transient performance data: not part of the stored trace format.
#[derive(Debug, Clone, Default)]
pub struct AgentTimings {
    /// Wall time of each local solve, per resource, across all iterations of
    /// all steps.
    pub per_resource_solve_s: BTreeMap<String, Vec<f64>>,
    /// Wall time of each full resource-update phase (dispatch, parallel
    /// solves, collection), one sample per consensus iteration.
    pub x_phase_wall_s: Vec<f64>,
}

impl AgentTimings {
    fn absorb(&mut self, fleet: &[(String, ResourceClass)], step: StepTimings) {
        for (r, samples) in step.per_resource_solve_s.into_iter().enumerate() {
            self.per_resource_solve_s
                .entry(fleet[r].0.clone())
                .or_default()
                .extend(samples);
        }
        self.x_phase_wall_s.extend(step.x_phase_wall_s);
    }
}

/// Full closed-loop log of one simulated day.
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub mode: ControlMode,
    pub day_id: String,
    /// Fleet in controller order; fixes the per-resource columns.
    pub fleet: Vec<(String, ResourceClass)>,
    pub records: Vec<StepRecord>,
    /// Human-readable anomalies: non-convergence, actuation corrections,
    /// harness fallbacks.  Empty on a clean run.
    pub incidents: Vec<String>,
    pub timings: Option<AgentTimings>,
}

/// How a closed-loop run is configured.  `limits` is what the controller
/// enforces (typically tightened); `audit_limits` is what the trace margins
/// are measured against (typically the true operating limits).
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub mode: ControlMode,
    pub horizon_len: usize,
    pub pf: PfLimit,
    pub limits: Option<GridLimits>,
    pub audit_limits: Option<GridLimits>,
    pub policy: PenaltyPolicy,
    pub tol: AdmmTolerances,
    pub inner: SolveOptions,
    pub oracle: PowerFlowOptions,
    /// Simulate only the first so many intervals (smoke runs).
    pub max_steps: Option<usize>,
    /// Run distributed steps on the threaded agent harness instead of the
    /// in-process loop; results are bit-identical either way.
    pub threaded_agents: bool,
    pub agent_options: AgentOptions,
}

impl SimulationConfig {
    pub fn new(mode: ControlMode) -> Self {
        SimulationConfig {
            mode,
            horizon_len: Horizon::DEFAULT_LEN,
            pf: PfLimit::default(),
            limits: None,
            audit_limits: None,
            policy: PenaltyPolicy::default(),
            tol: AdmmTolerances::default(),
            inner: SolveOptions::default(),
            oracle: PowerFlowOptions::default(),
            max_steps: None,
            threaded_agents: true,
            agent_options: AgentOptions::default(),
        }
    }
}

/// The controller-facing state the loop carries from one interval to the
/// next: measurement history for the persistence forecasts, the last realized
/// operating point for the model refresh, battery SOE, and the consensus
/// warm start.
struct LoopState {
    demand_p_hist: BTreeMap<u32, Vec<f64>>,
    demand_q_hist: BTreeMap<u32, Vec<f64>>,
    pot_hist: BTreeMap<String, Vec<f64>>,
    op_point: InjectionVector,
    soe_kwh: BTreeMap<String, f64>,
    warm: Option<AdmmState>,
}

/// Runs the full day (or `max_steps` intervals) of plan tracking in closed
/// loop and returns the trace.  The fleet's initial SOE comes from the
/// resource definitions; the controller only ever sees measurements produced
/// by the oracle, one interval behind the plant.
pub fn run_closed_loop(
    network: &NetworkModel,
    resources: &ResourceSet,
    plan: &DispatchPlan,
    realization: &RealizationData,
    config: &SimulationConfig,
) -> Result<SimulationTrace, SimError> {
    let steps = realization.validate(network, resources)?;
    plan.validate().map_err(SimError::Schedule)?;
    if plan.len() != steps {
        return Err(SimError::Input(format!(
            "plan has {} steps but the realization has {steps}",
            plan.len()
        )));
    }
    if config.horizon_len == 0 {
        return Err(SimError::Input("horizon length must be at least 1".into()));
    }
    for (_, params, _) in resources.batteries() {
        if (params.t_s_s - f64::from(plan.step_s)).abs() > 1e-9 {
            return Err(SimError::Input(format!(
                "battery sampling time {} s does not match the plan step {} s",
                params.t_s_s, plan.step_s
            )));
        }
    }
    let fleet: Vec<(String, ResourceClass)> = resources
        .resources
        .iter()
        .map(|r| (r.name.clone(), ResourceClass::of(&r.kind)))
        .collect();
    let limit_steps = config.max_steps.unwrap_or(steps).min(steps).max(1);

    let mut st = LoopState {
        demand_p_hist: realization.demand_p_kw.keys().map(|b| (*b, vec![])).collect(),
        demand_q_hist: realization.demand_q_kvar.keys().map(|b| (*b, vec![])).collect(),
        pot_hist: realization.pv_potential_kw.keys().map(|p| (p.clone(), vec![])).collect(),
        op_point: initial_operating_point(network, resources, realization)?,
        soe_kwh: resources
            .batteries()
            .map(|(r, _, soe0)| (r.name.clone(), soe0))
            .collect(),
        warm: None,
    };
    let mut trace = SimulationTrace {
        mode: config.mode,
        day_id: realization.day_id.clone(),
        fleet,
        records: Vec::with_capacity(limit_steps),
        incidents: Vec::new(),
        timings: (config.mode == ControlMode::Distributed && config.threaded_agents)
            .then(AgentTimings::default),
    };

    for t in 0..limit_steps {
        match run_one_step(network, resources, plan, realization, config, &mut st, &mut trace, t, steps)
        {
            Ok(record) => trace.records.push(record),
            Err(StepFailure::Fatal(e)) => return Err(e),
            Err(StepFailure::Oracle(reason)) => {
                return Err(SimError::Aborted {
                    step: t,
                    reason,
                    partial: Box::new(trace),
                })
            }
        }
    }
    Ok(trace)
}

/// Distinguishes hard input/solver errors from a plant-model failure, which
/// still hands the partial trace back to the caller.
enum StepFailure {
    Fatal(SimError),
    Oracle(String),
}

impl From<RtError> for StepFailure {
    fn from(e: RtError) -> Self {
        StepFailure::Fatal(SimError::Controller(e))
    }
}

impl From<GridError> for StepFailure {
    fn from(e: GridError) -> Self {
        StepFailure::Fatal(SimError::Grid(e))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_one_step(
    network: &NetworkModel,
    resources: &ResourceSet,
    plan: &DispatchPlan,
    realization: &RealizationData,
    config: &SimulationConfig,
    st: &mut LoopState,
    trace: &mut SimulationTrace,
    t: usize,
    steps: usize,
) -> Result<StepRecord, StepFailure> {
    let started = Instant::now();
    let h = Horizon::new(t, steps, config.horizon_len)
        .map_err(|e| StepFailure::Fatal(SimError::Controller(e)))?
        .len;

    // Forecasts from the measurements accumulated so far.  The first interval
    // has no history yet; it is seeded with the realized first sample,
    // standing in for the previous day's last measurement.
    let mut demand_fc = Vec::with_capacity(h);
    {
        let mut base = InjectionVector::zeros(network);
        for (bus, hist) in &st.demand_p_hist {
            let p = forecast_one(hist, &realization.demand_p_kw[bus], t);
            let q = forecast_one(&st.demand_q_hist[bus], &realization.demand_q_kvar[bus], t);
            base.add_kw(network, *bus, p, q)?;
        }
        demand_fc.resize(h, base);
    }
    let pot_fc: BTreeMap<String, Vec<f64>> = st
        .pot_hist
        .iter()
        .map(|(plant, hist)| {
            let f = forecast_one(hist, &realization.pv_potential_kw[plant], t);
            (plant.clone(), vec![f.max(0.0); h])
        })
        .collect();

    // Refresh the linear grid model at the last realized operating point.
    let lin = compute_sensitivities(network, &st.op_point, &config.oracle)?;

    let ctx = StepContext {
        network,
        resources,
        lin: &lin,
        limits: config.limits.as_ref(),
        pf: config.pf,
        plan_p_kw: &plan.p_disp_kw[t..t + h],
        demand: &demand_fc,
        soe_kwh: &st.soe_kwh,
        pv_potential_kw: &pot_fc,
    };

    let (setpoints, iterations, converged, soft_tracking) = match config.mode {
        ControlMode::Centralized => {
            let sol = solve_centralized(&ctx, &config.inner)?;
            if sol.soft_tracking {
                trace.incidents.push(format!(
                    "step {t}: tracking infeasible, slack engaged (gap {:.3} kW)",
                    sol.tracking_gap_kw
                ));
            }
            (sol.setpoints, sol.iterations, true, sol.soft_tracking)
        }
        ControlMode::Distributed => {
            let warm = st.warm.take();
            let outcome = if config.threaded_agents {
                let agent = run_agents(
                    &ctx,
                    warm,
                    &config.policy,
                    &config.tol,
                    &config.inner,
                    &config.agent_options,
                )?;
                if let Some(reason) = agent.fallback {
                    trace.incidents.push(format!("step {t}: {reason}"));
                }
                if let (Some(acc), Some(step)) = (trace.timings.as_mut(), agent.timings) {
                    acc.absorb(&trace.fleet, step);
                }
                agent.admm
            } else {
                run_admm(&ctx, warm, &config.policy, &config.tol, &config.inner)?
            };
            if !outcome.report.converged {
                trace.incidents.push(format!(
                    "step {t}: consensus stopped at {} iterations (primal {:.3e} vs {:.3e}, dual {:.3e} vs {:.3e}); best iterate actuated",
                    outcome.report.iterations,
                    outcome.report.primal_norm,
                    outcome.report.eps_primal,
                    outcome.report.dual_norm,
                    outcome.report.eps_dual,
                ));
            }
            if outcome.report.soft_tracking {
                trace.incidents.push(format!(
                    "step {t}: tracking infeasible, slack engaged (gap {:.3} kW)",
                    outcome.report.tracking_gap_kw
                ));
            }
            if t + 1 < steps {
                let next_h = config.horizon_len.min(steps - (t + 1));
                st.warm = Some(outcome.state.shifted_for_next_step(next_h));
            }
            (
                outcome.setpoints,
                outcome.report.iterations,
                outcome.report.converged,
                outcome.report.soft_tracking,
            )
        }
    };

    // Actuation: clip PV to the realized potential, pin reactive power on
    // converters that cannot produce it, and project numerically overshooting
    // setpoints back onto the rating disk.
    let mut injections = BTreeMap::new();
    let mut curtailment = BTreeMap::new();
    let mut soe_next = BTreeMap::new();
    for r in &resources.resources {
        let sp = *setpoints.get(&r.name).ok_or_else(|| {
            StepFailure::Fatal(SimError::Input(format!(
                "controller returned no setpoint for {}",
                r.name
            )))
        })?;
        let mut inj = sp;
        match &r.kind {
            ResourceKind::Battery { params, .. } => {
                inj = project_rating(inj, params.s_max_kva, &r.name, t, &mut trace.incidents);
                let state = BatteryState {
                    soe_kwh: st.soe_kwh[&r.name],
                };
                soe_next.insert(r.name.clone(), battery_soe_step(state, inj.p_kw, params).soe_kwh);
            }
            ResourceKind::Pv(params) => {
                let pot = realization.pv_potential_kw[&r.name][t];
                inj.p_kw = inj.p_kw.clamp(0.0, pot);
                if !params.reactive_capable {
                    inj.q_kvar = 0.0;
                }
                inj = project_rating(inj, params.s_max_kva, &r.name, t, &mut trace.incidents);
                curtailment.insert(r.name.clone(), (pot - inj.p_kw).max(0.0));
            }
        }
        let report = check_capability(inj, &r.kind);
        if !report.ok() {
            return Err(StepFailure::Fatal(SimError::Input(format!(
                "step {t}: actuation for {} infeasible after projection: {:?}",
                r.name, report.issues
            ))));
        }
        injections.insert(r.name.clone(), inj);
    }
    let solve_seconds = started.elapsed().as_secs_f64();

    // Plant step: full AC power flow at the realized demand and actuated
    // injections, plus the uncontrolled counterfactual.
    let inj_real = realized_injections(network, resources, realization, t, Some(&injections))
        .map_err(StepFailure::Fatal)?;
    let pf_real = solve_power_flow(network, &inj_real, &config.oracle)
        .map_err(|e| StepFailure::Oracle(format!("plant power flow failed: {e}")))?;
    let inj_unc = realized_injections(network, resources, realization, t, None)
        .map_err(StepFailure::Fatal)?;
    let pf_unc = solve_power_flow(network, &inj_unc, &config.oracle)
        .map_err(|e| StepFailure::Oracle(format!("counterfactual power flow failed: {e}")))?;

    let (v_low, v_high, amp) = margins(&pf_real, config.audit_limits.as_ref());

    // Advance the controller-visible state.  The stored SOE is clamped into
    // the usable band only to absorb solver-tolerance drift; the trace keeps
    // the raw value.
    for (name, soe) in &soe_next {
        let (lo, hi) = resources
            .batteries()
            .find(|(r, _, _)| &r.name == name)
            .map(|(_, p, _)| (p.soe_min_kwh(), p.soe_max_kwh()))
            .expect("battery fleet is fixed");
        st.soe_kwh.insert(name.clone(), soe.clamp(lo, hi));
    }
    for (bus, hist) in st.demand_p_hist.iter_mut() {
        hist.push(realization.demand_p_kw[bus][t]);
    }
    for (bus, hist) in st.demand_q_hist.iter_mut() {
        hist.push(realization.demand_q_kvar[bus][t]);
    }
    for (plant, hist) in st.pot_hist.iter_mut() {
        hist.push(realization.pv_potential_kw[plant][t]);
    }
    st.op_point = inj_real;

    Ok(StepRecord {
        t,
        plan_p_kw: plan.p_disp_kw[t],
        plan_q_kvar: plan.q_disp_kvar[t],
        realized_p_kw: network.base.power_to_kw(pf_real.p_gcp_pu),
        realized_q_kvar: network.base.power_to_kw(pf_real.q_gcp_pu),
        uncontrolled_p_kw: network.base.power_to_kw(pf_unc.p_gcp_pu),
        setpoints,
        injections,
        soe_kwh: soe_next,
        curtailment_kw: curtailment,
        iterations,
        converged,
        soft_tracking,
        solve_seconds,
        v_low_margin_pu: v_low,
        v_high_margin_pu: v_high,
        ampacity_margin_pu: amp,
    })
}

/// Persistence forecast over the measurements before step `t`; the first
/// interval is seeded with the realized first sample.
fn forecast_one(hist: &[f64], series: &[f64], t: usize) -> f64 {
    let window: &[f64] = if t == 0 { &series[0..1] } else { hist };
    persistence_forecast(window, 1).expect("window is never empty")[0]
}

/// Before any interval has run, the model is linearized at the forecast
/// state: realized first-sample demand, PV at potential, batteries idle.
fn initial_operating_point(
    network: &NetworkModel,
    resources: &ResourceSet,
    realization: &RealizationData,
) -> Result<InjectionVector, SimError> {
    let mut inj = InjectionVector::zeros(network);
    for (bus, series) in &realization.demand_p_kw {
        inj.add_kw(network, *bus, series[0], realization.demand_q_kvar[bus][0])?;
    }
    for (r, _) in resources.pvs() {
        inj.add_kw(network, r.bus(), realization.pv_potential_kw[&r.name][0], 0.0)?;
    }
    Ok(inj)
}

/// Realized injection vector at step `t`: demand plus either the actuated
/// fleet or (for the counterfactual) PV at full potential with batteries
/// idle.
fn realized_injections(
    network: &NetworkModel,
    resources: &ResourceSet,
    realization: &RealizationData,
    t: usize,
    fleet: Option<&BTreeMap<String, ResourceSetpoint>>,
) -> Result<InjectionVector, SimError> {
    let mut inj = InjectionVector::zeros(network);
    for (bus, series) in &realization.demand_p_kw {
        inj.add_kw(network, *bus, series[t], realization.demand_q_kvar[bus][t])?;
    }
    match fleet {
        Some(injections) => {
            for r in &resources.resources {
                let sp = injections.get(&r.name).ok_or_else(|| {
                    SimError::Input(format!("no realized injection for {}", r.name))
                })?;
                inj.add_kw(network, r.bus(), sp.p_kw, sp.q_kvar)?;
            }
        }
        None => {
            for (r, _) in resources.pvs() {
                inj.add_kw(
                    network,
                    r.bus(),
                    realization.pv_potential_kw[&r.name][t],
                    0.0,
                )?;
            }
        }
    }
    Ok(inj)
}

/// Projects a setpoint onto the rating disk; corrections beyond solver
/// tolerance are logged as incidents.
fn project_rating(
    sp: ResourceSetpoint,
    rating_kva: f64,
    name: &str,
    t: usize,
    incidents: &mut Vec<String>,
) -> ResourceSetpoint {
    let mag = sp.magnitude_kva();
    if mag <= rating_kva || !rating_kva.is_finite() {
        return sp;
    }
    if mag - rating_kva > ACTUATION_SLACK_KVA {
        incidents.push(format!(
            "step {t}: setpoint for {name} exceeded the rating by {:.3e} kVA; projected",
            mag - rating_kva
        ));
    }
    let scale = (rating_kva / mag) * (1.0 - 1e-12);
    ResourceSetpoint {
        p_kw: sp.p_kw * scale,
        q_kvar: sp.q_kvar * scale,
    }
}

fn margins(pf: &PowerFlowSolution, limits: Option<&GridLimits>) -> (f64, f64, f64) {
    match limits {
        None => (f64::INFINITY, f64::INFINITY, f64::INFINITY),
        Some(lim) => {
            let v_low = pf
                .v_pu
                .iter()
                .map(|v| v - lim.v_min_pu)
                .fold(f64::INFINITY, f64::min);
            let v_high = pf
                .v_pu
                .iter()
                .map(|v| lim.v_max_pu - v)
                .fold(f64::INFINITY, f64::min);
            let amp = pf
                .i_pu
                .iter()
                .zip(&lim.i_max_pu)
                .map(|(i, max)| max - i)
                .fold(f64::INFINITY, f64::min);
            (v_low, v_high, amp)
        }
    }
}

/// Error statistics of a deviation series, in kW and — when the mean plan
/// magnitude is large enough to normalize against — as a percentage of it.
#[derive(Debug, Clone, Copy)]
pub struct ErrorStats {
    pub rmse_kw: f64,
    pub mean_kw: f64,
    pub mae_kw: f64,
    pub rmse_pct: Option<f64>,
    pub mean_pct: Option<f64>,
    pub mae_pct: Option<f64>,
}

impl ErrorStats {
    fn of(errors: &[f64], mean_plan_kw: f64) -> Self {
        let n = errors.len() as f64;
        let rmse_kw = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let mean_kw = errors.iter().sum::<f64>() / n;
        let mae_kw = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
        let pct = |kw: f64| {
            (mean_plan_kw.abs() >= MRMSE_NORMALIZATION_FLOOR_KW)
                .then(|| 100.0 * kw / mean_plan_kw.abs())
        };
        ErrorStats {
            rmse_kw,
            mean_kw,
            mae_kw,
            rmse_pct: pct(rmse_kw),
            mean_pct: pct(mean_kw),
            mae_pct: pct(mae_kw),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IterationStats {
    pub mean: f64,
    pub sd: f64,
    pub max: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TimeStats {
    pub mean_s: f64,
    pub sd_s: f64,
    pub max_s: f64,
}

/// Day-level summary of a trace: tracking error of the realized feeder
/// exchange against the plan, the uncontrolled counterfactual against the
/// same plan over the same steps, and controller effort statistics.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub steps: usize,
    pub mean_plan_kw: f64,
    pub tracking: ErrorStats,
    pub uncontrolled: ErrorStats,
    pub iterations: IterationStats,
    pub times: TimeStats,
    pub total_curtailed_kwh: f64,
    pub steps_not_converged: usize,
}

/// Summarizes a trace against the plan it tracked.  The plan is the
/// normalization reference; it must cover the recorded steps.
pub fn compute_metrics(trace: &SimulationTrace, plan: &DispatchPlan) -> Result<Metrics, SimError> {
    if trace.records.is_empty() {
        return Err(SimError::Input("trace has no records".into()));
    }
    let mut errors = Vec::with_capacity(trace.records.len());
    let mut unc_errors = Vec::with_capacity(trace.records.len());
    let mut plan_sum = 0.0;
    let mut curtailed_kwh = 0.0;
    for rec in &trace.records {
        let p = plan.p_disp_kw.get(rec.t).copied().ok_or_else(|| {
            SimError::Input(format!("plan has no step {} recorded in the trace", rec.t))
        })?;
        if (p - rec.plan_p_kw).abs() > 1e-6 {
            return Err(SimError::Input(format!(
                "trace step {} was produced against a different plan ({} vs {} kW)",
                rec.t, rec.plan_p_kw, p
            )));
        }
        errors.push(rec.realized_p_kw - p);
        unc_errors.push(rec.uncontrolled_p_kw - p);
        plan_sum += p;
        curtailed_kwh +=
            rec.curtailment_kw.values().sum::<f64>() * f64::from(plan.step_s) / 3600.0;
    }
    let n = trace.records.len();
    let mean_plan_kw = plan_sum / n as f64;

    let iters: Vec<f64> = trace.records.iter().map(|r| r.iterations as f64).collect();
    let (it_mean, it_sd) = mean_sd(&iters);
    let times: Vec<f64> = trace.records.iter().map(|r| r.solve_seconds).collect();
    let (tm_mean, tm_sd) = mean_sd(&times);

    Ok(Metrics {
        steps: n,
        mean_plan_kw,
        tracking: ErrorStats::of(&errors, mean_plan_kw),
        uncontrolled: ErrorStats::of(&unc_errors, mean_plan_kw),
        iterations: IterationStats {
            mean: it_mean,
            sd: it_sd,
            max: trace.records.iter().map(|r| r.iterations).max().unwrap_or(0),
        },
        times: TimeStats {
            mean_s: tm_mean,
            sd_s: tm_sd,
            max_s: times.iter().fold(0.0f64, |a, b| a.max(*b)),
        },
        total_curtailed_kwh: curtailed_kwh,
        steps_not_converged: trace.records.iter().filter(|r| !r.converged).count(),
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Re-checks every recorded interval against the limits with a fresh AC
/// power flow built from the logged injections — an after-the-fact audit
/// that does not trust the margins the simulator recorded.
pub fn audit_trace(
    network: &NetworkModel,
    resources: &ResourceSet,
    realization: &RealizationData,
    trace: &SimulationTrace,
    limits: &GridLimits,
) -> Result<Vec<AuditReport>, SimError> {
    let mut reports = Vec::with_capacity(trace.records.len());
    for rec in &trace.records {
        let inj =
            realized_injections(network, resources, realization, rec.t, Some(&rec.injections))?;
        reports.push(audit_constraints(AuditMode::Exact(network), &inj, limits)?);
    }
    Ok(reports)
}

/// One row of the storage-fleet sweep.
#[derive(Debug, Clone)]
pub struct BessSweepRow {
    pub count: usize,
    pub fleet: ResourceSet,
    pub metrics: Metrics,
    pub timings: Option<AgentTimings>,
}

/// Re-runs the day with the storage capacity split across 1, 2, … identical
/// units placed on `unit_buses`, keeping the total capacity, rating, and
/// initial energy fixed.  Always runs the distributed controller on the
/// threaded harness so per-resource compute times are observable.
pub fn sweep_bess(
    network: &NetworkModel,
    resources: &ResourceSet,
    plan: &DispatchPlan,
    realization: &RealizationData,
    config: &SimulationConfig,
    counts: &[usize],
    unit_buses: &[u32],
) -> Result<Vec<BessSweepRow>, SimError> {
    let (template, params, soe0) = resources
        .batteries()
        .next()
        .map(|(r, p, s)| (r.name.clone(), p.clone(), s))
        .ok_or_else(|| SimError::Input("fleet has no battery to sweep".into()))?;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        if count == 0 {
            return Err(SimError::Input("unit count must be at least 1".into()));
        }
        if count > unit_buses.len() {
            return Err(SimError::Input(format!(
                "{count} units requested but only {} buses available",
                unit_buses.len()
            )));
        }
        let share = 1.0 / count as f64;
        let mut fleet: Vec<Resource> = Vec::new();
        for (i, bus) in unit_buses.iter().take(count).enumerate() {
            let mut p = params.clone();
            p.bus = *bus;
            p.capacity_kwh *= share;
            p.s_max_kva *= share;
            fleet.push(Resource {
                name: format!("{template}{}", i + 1),
                kind: ResourceKind::Battery {
                    params: p,
                    initial_soe_kwh: soe0 * share,
                },
            });
        }
        fleet.extend(
            resources
                .resources
                .iter()
                .filter(|r| matches!(r.kind, ResourceKind::Pv(_)))
                .cloned(),
        );
        let fleet = ResourceSet::new(fleet)?;
        let mut cfg = config.clone();
        cfg.mode = ControlMode::Distributed;
        cfg.threaded_agents = true;
        let trace = run_closed_loop(network, &fleet, plan, realization, &cfg)?;
        let metrics = compute_metrics(&trace, plan)?;
        rows.push(BessSweepRow {
            count,
            fleet,
            metrics,
            timings: trace.timings,
        });
    }
    Ok(rows)
}

/// One row of the deviation-price sweep.
#[derive(Debug, Clone)]
pub struct LambdaSweepRow {
    pub lambda: f64,
    pub reliability: PlanReliability,
    pub objective: f64,
    pub solve_seconds: f64,
}

/// Recomputes the day-ahead schedule for each deviation price and reports
/// the plan-reliability statistic per price.  No ordering between rows is
/// assumed; the caller judges the spread.
pub fn sweep_lambda(
    network: &NetworkModel,
    resources: &ResourceSet,
    scenarios: &ScenarioSet,
    base: &DayAheadConfig,
    lambdas: &[f64],
) -> Result<Vec<LambdaSweepRow>, SimError> {
    if lambdas.is_empty() {
        return Err(SimError::Input("no deviation prices given".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !(lambda > 0.0) {
            return Err(SimError::Input(format!(
                "deviation price must be positive, got {lambda}"
            )));
        }
        let mut cfg = base.clone();
        cfg.lambda_default = lambda;
        cfg.lambda.clear();
        let sol = solve_dayahead(network, resources, scenarios, &cfg)?;
        let realized: Vec<Vec<f64>> = sol
            .per_scenario
            .iter()
            .map(|s| s.p0_kw.clone())
            .collect();
        let reliability = plan_reliability_mrmse(&sol.plan.p_disp_kw, &realized)?;
        rows.push(LambdaSweepRow {
            lambda,
            reliability,
            objective: sol.objective,
            solve_seconds: sol.solve_seconds,
        });
    }
    Ok(rows)
}
