//! Threaded execution harness for the distributed tracking controller: one
//! worker thread per resource, with the aggregator on the calling thread,
//! synchronized once per consensus iteration.
//!
//! The per-resource updates of one iteration are mutually independent, so
//! running them concurrently and reducing the results in fleet order yields
//! bit-for-bit the same iterates, residuals, and setpoints as the sequential
//! loop — regardless of scheduling, delays, or core count.

use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::qp::SolveOptions;
use crate::realtime_mpc::{
    resource_update, run_admm, run_admm_with, AdmmOutcome, AdmmState, AdmmTolerances,
    PenaltyPolicy, RtError, StepContext, Trajectory,
};

/// Marker distinguishing a lost worker (panic) from a genuine solver error;
/// produced and consumed only inside this harness.
const WORKER_LOST: &str = "resource worker lost";

/// Harness instrumentation, used by tests to exercise scheduling orders and
/// the fallback path.  The default injects nothing.
#[derive(Debug, Clone, Default)]
pub struct AgentOptions {
    /// Extra sleep (milliseconds) per worker before each local solve,
    /// indexed by resource position; missing entries mean no delay.
    pub delay_ms: Vec<u64>,
    /// `(resource position, 1-based iteration)` at which that worker panics.
    pub fail_at: Option<(usize, usize)>,
}

/// Wall-time samples from one controller step on the threaded harness.
#[derive(Debug, Clone)]
pub struct StepTimings {
    /// One series per resource (fleet order): local-solve seconds, one
    /// sample per consensus iteration.
    pub per_resource_solve_s: Vec<Vec<f64>>,
    /// Wall seconds of the whole resource phase (dispatch, parallel solves,
    /// ordered collection), one sample per consensus iteration.
    pub x_phase_wall_s: Vec<f64>,
}

/// Result of one controller step on the threaded harness.
#[derive(Debug)]
pub struct AgentOutcome {
    pub admm: AdmmOutcome,
    /// Set when a lost worker forced the sequential fallback.
    pub fallback: Option<String>,
    /// Absent after a fallback; the interrupted samples are discarded.
    pub timings: Option<StepTimings>,
}

/// Runs one consensus step with each resource agent on its own thread.
///
/// Per iteration the aggregator broadcasts the proximal targets, every worker
/// solves its local problem concurrently, and the results are collected in
/// fleet order before the shared iteration logic resumes — a barrier per
/// iteration.  A worker that dies mid-step (observed as a closed channel)
/// triggers a sequential re-run of the whole step from the original warm
/// start, reported in [`AgentOutcome::fallback`]; solver errors inside a
/// worker propagate as-is.
pub fn run_agents(
    ctx: &StepContext,
    warm: Option<AdmmState>,
    policy: &PenaltyPolicy,
    tol: &AdmmTolerances,
    inner: &SolveOptions,
    opts: &AgentOptions,
) -> Result<AgentOutcome, RtError> {
    let n = ctx.resources.len();
    let warm_backup = warm.clone();
    let mut timings = StepTimings {
        per_resource_solve_s: vec![Vec::new(); n],
        x_phase_wall_s: Vec::new(),
    };

    let result = thread::scope(|scope| -> Result<AdmmOutcome, RtError> {
        let mut to_workers = Vec::with_capacity(n);
        let mut from_workers = Vec::with_capacity(n);
        let mut handles = Vec::with_capacity(n);
        for r in 0..n {
            let (tx_target, rx_target) = mpsc::channel::<(usize, Trajectory, f64)>();
            let (tx_x, rx_x) = mpsc::channel::<(f64, Result<Trajectory, RtError>)>();
            to_workers.push(tx_target);
            from_workers.push(rx_x);
            let delay = opts.delay_ms.get(r).copied().unwrap_or(0);
            let fail_at = opts.fail_at;
            let res = &ctx.resources.resources[r];
            handles.push(scope.spawn(move || {
                while let Ok((iteration, target, rho)) = rx_target.recv() {
                    if fail_at == Some((r, iteration)) {
                        panic!("injected worker fault");
                    }
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    let t0 = Instant::now();
                    let update = resource_update(res, ctx, &target, rho, inner);
                    if tx_x.send((t0.elapsed().as_secs_f64(), update)).is_err() {
                        break;
                    }
                }
            }));
        }

        let mut iteration = 0usize;
        let mut x_exec = |_: &StepContext, targets: &[Trajectory], rho: f64| {
            iteration += 1;
            let phase = Instant::now();
            for (r, target) in targets.iter().enumerate() {
                if to_workers[r].send((iteration, target.clone(), rho)).is_err() {
                    return Err(RtError::Input(WORKER_LOST.into()));
                }
            }
            let mut xs = Vec::with_capacity(n);
            for r in 0..n {
                match from_workers[r].recv() {
                    Ok((secs, Ok(x))) => {
                        timings.per_resource_solve_s[r].push(secs);
                        xs.push(x);
                    }
                    Ok((_, Err(e))) => return Err(e),
                    Err(_) => return Err(RtError::Input(WORKER_LOST.into())),
                }
            }
            timings.x_phase_wall_s.push(phase.elapsed().as_secs_f64());
            Ok(xs)
        };
        let out = run_admm_with(ctx, warm, policy, tol, inner, &mut x_exec);
        drop(to_workers);
        for handle in handles {
            // A panicked worker already surfaced as WORKER_LOST; joining here
            // keeps the scope from re-raising it.
            let _ = handle.join();
        }
        out
    });

    match result {
        Ok(admm) => Ok(AgentOutcome {
            admm,
            fallback: None,
            timings: Some(timings),
        }),
        Err(RtError::Input(msg)) if msg == WORKER_LOST => {
            let admm = run_admm(ctx, warm_backup, policy, tol, inner)?;
            Ok(AgentOutcome {
                admm,
                fallback: Some(
                    "resource worker failed mid-step; re-ran the step sequentially".into(),
                ),
                timings: None,
            })
        }
        Err(e) => Err(e),
    }
}
