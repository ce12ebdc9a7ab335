//! Columnar text format for simulation traces: `#`-prefixed header lines
//! (day, mode, fleet, incidents, column names), then one whitespace-separated
//! row per interval.
//!
//! The format stores only deterministic quantities — wall-clock times stay
//! in memory — so re-running the same simulation reproduces the file byte for
//! byte.  Parsed records therefore report zero solve time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{ControlMode, ResourceClass, SimError, SimulationTrace, StepRecord};
use crate::resources::ResourceSetpoint;

/// Columns before the per-resource blocks.
const BASE_COLUMNS: usize = 12;
/// Columns per resource: setpoint p/q, injection p/q, and the class-specific
/// column (battery SOE or PV curtailment).
const RESOURCE_COLUMNS: usize = 5;

pub fn trace_to_string(trace: &SimulationTrace) -> Result<String, SimError> {
    for (name, _) in &trace.fleet {
        if name.contains(char::is_whitespace) || name.contains(':') {
            return Err(SimError::Input(format!(
                "resource name {name:?} cannot be stored in a columnar trace"
            )));
        }
    }
    let mut out = String::new();
    out.push_str("# closed-loop trace v1\n");
    let _ = writeln!(out, "# day: {}", trace.day_id);
    let _ = writeln!(out, "# mode: {}", trace.mode.as_str());
    out.push_str("# fleet:");
    for (name, class) in &trace.fleet {
        let _ = write!(out, " {name}:{}", class.as_str());
    }
    out.push('\n');
    for incident in &trace.incidents {
        let _ = writeln!(out, "# incident: {incident}");
    }
    out.push_str(
        "# columns: step plan_p_kw plan_q_kvar realized_p_kw realized_q_kvar \
         uncontrolled_p_kw iterations converged soft_tracking v_low_margin_pu \
         v_high_margin_pu ampacity_margin_pu",
    );
    for (name, class) in &trace.fleet {
        let last = match class {
            ResourceClass::Battery => "soe_kwh",
            ResourceClass::Pv => "curtail_kw",
        };
        let _ = write!(
            out,
            " {name}.sp_p_kw {name}.sp_q_kvar {name}.inj_p_kw {name}.inj_q_kvar {name}.{last}"
        );
    }
    out.push('\n');

    for rec in &trace.records {
        let _ = write!(
            out,
            "{} {:.9} {:.9} {:.9} {:.9} {:.9} {} {} {} {:.9} {:.9} {:.9}",
            rec.t,
            rec.plan_p_kw,
            rec.plan_q_kvar,
            rec.realized_p_kw,
            rec.realized_q_kvar,
            rec.uncontrolled_p_kw,
            rec.iterations,
            rec.converged as u8,
            rec.soft_tracking as u8,
            rec.v_low_margin_pu,
            rec.v_high_margin_pu,
            rec.ampacity_margin_pu,
        );
        for (name, class) in &trace.fleet {
            let missing =
                || SimError::Input(format!("step {} has no data for {name}", rec.t));
            let sp = rec.setpoints.get(name).ok_or_else(missing)?;
            let inj = rec.injections.get(name).ok_or_else(missing)?;
            let extra = match class {
                ResourceClass::Battery => *rec.soe_kwh.get(name).ok_or_else(missing)?,
                ResourceClass::Pv => *rec.curtailment_kw.get(name).ok_or_else(missing)?,
            };
            let _ = write!(
                out,
                " {:.9} {:.9} {:.9} {:.9} {:.9}",
                sp.p_kw, sp.q_kvar, inj.p_kw, inj.q_kvar, extra
            );
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn trace_from_str(text: &str) -> Result<SimulationTrace, SimError> {
    let mut day_id = String::new();
    let mut mode: Option<ControlMode> = None;
    let mut fleet: Vec<(String, ResourceClass)> = Vec::new();
    let mut incidents = Vec::new();
    let mut records = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let ln = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim_start();
            if let Some(v) = rest.strip_prefix("day:") {
                day_id = v.trim().to_string();
            } else if let Some(v) = rest.strip_prefix("mode:") {
                mode = Some(match v.trim() {
                    "centralized" => ControlMode::Centralized,
                    "distributed" => ControlMode::Distributed,
                    other => {
                        return Err(SimError::Input(format!(
                            "trace line {ln}: unknown mode {other:?}"
                        )))
                    }
                });
            } else if let Some(v) = rest.strip_prefix("fleet:") {
                for entry in v.split_whitespace() {
                    let (name, class) = entry.split_once(':').ok_or_else(|| {
                        SimError::Input(format!(
                            "trace line {ln}: fleet entry {entry:?} is not name:class"
                        ))
                    })?;
                    let class = match class {
                        "battery" => ResourceClass::Battery,
                        "pv" => ResourceClass::Pv,
                        other => {
                            return Err(SimError::Input(format!(
                                "trace line {ln}: unknown resource class {other:?}"
                            )))
                        }
                    };
                    fleet.push((name.to_string(), class));
                }
            } else if let Some(v) = rest.strip_prefix("incident:") {
                incidents.push(v.trim().to_string());
            }
            continue;
        }

        if fleet.is_empty() {
            return Err(SimError::Input(format!(
                "trace line {ln}: data row before the fleet header"
            )));
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let expected = BASE_COLUMNS + RESOURCE_COLUMNS * fleet.len();
        if cols.len() != expected {
            return Err(SimError::Input(format!(
                "trace line {ln}: {} columns, expected {expected}",
                cols.len()
            )));
        }
        let num = |i: usize| -> Result<f64, SimError> {
            cols[i].parse::<f64>().map_err(|_| {
                SimError::Input(format!(
                    "trace line {ln}: column {} is not a number: {:?}",
                    i + 1,
                    cols[i]
                ))
            })
        };
        let int = |i: usize| -> Result<usize, SimError> {
            cols[i].parse::<usize>().map_err(|_| {
                SimError::Input(format!(
                    "trace line {ln}: column {} is not a count: {:?}",
                    i + 1,
                    cols[i]
                ))
            })
        };
        let flag = |i: usize| -> Result<bool, SimError> {
            match cols[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(SimError::Input(format!(
                    "trace line {ln}: column {} is not a 0/1 flag: {other:?}",
                    i + 1
                ))),
            }
        };

        let mut setpoints = BTreeMap::new();
        let mut injections = BTreeMap::new();
        let mut soe_kwh = BTreeMap::new();
        let mut curtailment_kw = BTreeMap::new();
        for (r, (name, class)) in fleet.iter().enumerate() {
            let base = BASE_COLUMNS + RESOURCE_COLUMNS * r;
            setpoints.insert(
                name.clone(),
                ResourceSetpoint {
                    p_kw: num(base)?,
                    q_kvar: num(base + 1)?,
                },
            );
            injections.insert(
                name.clone(),
                ResourceSetpoint {
                    p_kw: num(base + 2)?,
                    q_kvar: num(base + 3)?,
                },
            );
            match class {
                ResourceClass::Battery => {
                    soe_kwh.insert(name.clone(), num(base + 4)?);
                }
                ResourceClass::Pv => {
                    curtailment_kw.insert(name.clone(), num(base + 4)?);
                }
            }
        }
        records.push(StepRecord {
            t: int(0)?,
            plan_p_kw: num(1)?,
            plan_q_kvar: num(2)?,
            realized_p_kw: num(3)?,
            realized_q_kvar: num(4)?,
            uncontrolled_p_kw: num(5)?,
            iterations: int(6)?,
            converged: flag(7)?,
            soft_tracking: flag(8)?,
            solve_seconds: 0.0,
            v_low_margin_pu: num(9)?,
            v_high_margin_pu: num(10)?,
            ampacity_margin_pu: num(11)?,
            setpoints,
            injections,
            soe_kwh,
            curtailment_kw,
        });
    }

    let mode = mode.ok_or_else(|| SimError::Input("trace has no mode header".into()))?;
    if fleet.is_empty() {
        return Err(SimError::Input("trace has no fleet header".into()));
    }
    Ok(SimulationTrace {
        mode,
        day_id,
        fleet,
        records,
        incidents,
        timings: None,
    })
}

pub fn save_trace(path: &Path, trace: &SimulationTrace) -> Result<(), SimError> {
    let text = trace_to_string(trace)?;
    std::fs::write(path, text).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_trace(path: &Path) -> Result<SimulationTrace, SimError> {
    let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    trace_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SimulationTrace {
        let fleet = vec![
            ("bess".to_string(), ResourceClass::Battery),
            ("pv1".to_string(), ResourceClass::Pv),
        ];
        let rec = |t: usize| StepRecord {
            t,
            plan_p_kw: -10.0 + t as f64,
            plan_q_kvar: 0.5,
            realized_p_kw: -10.1 + t as f64,
            realized_q_kvar: 0.4,
            uncontrolled_p_kw: -12.0,
            setpoints: [
                ("bess".to_string(), ResourceSetpoint { p_kw: 1.0, q_kvar: 0.2 }),
                ("pv1".to_string(), ResourceSetpoint { p_kw: 3.0, q_kvar: 0.0 }),
            ]
            .into_iter()
            .collect(),
            injections: [
                ("bess".to_string(), ResourceSetpoint { p_kw: 1.0, q_kvar: 0.2 }),
                ("pv1".to_string(), ResourceSetpoint { p_kw: 2.5, q_kvar: 0.0 }),
            ]
            .into_iter()
            .collect(),
            soe_kwh: [("bess".to_string(), 18.5 - 0.01 * t as f64)].into_iter().collect(),
            curtailment_kw: [("pv1".to_string(), 0.5)].into_iter().collect(),
            iterations: 7 + t,
            converged: t != 1,
            soft_tracking: false,
            solve_seconds: 0.0,
            v_low_margin_pu: 0.03,
            v_high_margin_pu: f64::INFINITY,
            ampacity_margin_pu: 1.2,
        };
        SimulationTrace {
            mode: ControlMode::Distributed,
            day_id: "day-1".to_string(),
            fleet,
            records: (0..3).map(rec).collect(),
            incidents: vec!["step 1: consensus stopped at 50 iterations".to_string()],
            timings: None,
        }
    }

    #[test]
    fn roundtrip_preserves_records_and_headers() {
        let trace = sample();
        let text = trace_to_string(&trace).unwrap();
        let back = trace_from_str(&text).unwrap();
        assert_eq!(back.mode, trace.mode);
        assert_eq!(back.day_id, trace.day_id);
        assert_eq!(back.fleet, trace.fleet);
        assert_eq!(back.incidents, trace.incidents);
        assert_eq!(back.records, trace.records);
        // Serialization of a parsed trace is byte-stable.
        assert_eq!(trace_to_string(&back).unwrap(), text);
    }

    #[test]
    fn infinite_margins_survive_the_roundtrip() {
        let trace = sample();
        let text = trace_to_string(&trace).unwrap();
        let back = trace_from_str(&text).unwrap();
        assert!(back.records[0].v_high_margin_pu.is_infinite());
    }

    #[test]
    fn wrong_column_count_is_rejected_with_line_number() {
        let trace = sample();
        let mut text = trace_to_string(&trace).unwrap();
        text.push_str("4 1.0 2.0\n");
        let err = trace_from_str(&text).unwrap_err();
        assert!(err.to_string().contains("columns"), "{err}");
    }

    #[test]
    fn missing_mode_header_is_rejected() {
        let text = "# fleet: a:battery\n0 1 2 3 4 5 6 1 0 7 8 9 1 2 3 4 5\n";
        let err = trace_from_str(text).unwrap_err();
        assert!(err.to_string().contains("mode"), "{err}");
    }

    #[test]
    fn unknown_resource_class_is_rejected() {
        let text = "# mode: centralized\n# fleet: a:windmill\n";
        let err = trace_from_str(text).unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
    }

    #[test]
    fn whitespace_resource_names_cannot_be_serialized() {
        let mut trace = sample();
        trace.fleet[0].0 = "two words".to_string();
        assert!(trace_to_string(&trace).is_err());
    }
}
