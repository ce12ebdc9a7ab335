//! Dispatch-plan file format.
//!
//! Two header keys followed by one data row per step:
//!
//! ```text
//! start = 2025-06-10T00:00:00Z
//! step_s = 30
//! # p_disp_kw q_disp_kvar
//! 12.5 3.125
//! ```
//!
//! `#` starts a comment.  Floats are written with the shortest
//! round-trip representation, so serialization is deterministic and
//! byte-identical across runs.

use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};

use super::{DayAheadError, DispatchPlan};

pub fn plan_to_string(plan: &DispatchPlan) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "start = {}\n",
        plan.start_utc.to_rfc3339_opts(SecondsFormat::Secs, true)
    ));
    out.push_str(&format!("step_s = {}\n", plan.step_s));
    out.push_str("# p_disp_kw q_disp_kvar\n");
    for (p, q) in plan.p_disp_kw.iter().zip(&plan.q_disp_kvar) {
        out.push_str(&format!("{p} {q}\n"));
    }
    out
}

pub fn plan_from_str(text: &str) -> Result<DispatchPlan, DayAheadError> {
    let mut start: Option<DateTime<Utc>> = None;
    let mut step_s: Option<u32> = None;
    let mut p_disp_kw = Vec::new();
    let mut q_disp_kvar = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DayAheadError::Parse { line: line_no, msg };
        if let Some((key, value)) = line.split_once('=') {
            let value = value.trim();
            match key.trim() {
                "start" => {
                    let dt = DateTime::parse_from_rfc3339(value)
                        .map_err(|e| err(format!("bad start timestamp '{value}': {e}")))?;
                    start = Some(dt.with_timezone(&Utc));
                }
                "step_s" => {
                    step_s = Some(
                        value
                            .parse()
                            .map_err(|_| err(format!("bad step_s '{value}'")))?,
                    );
                }
                other => return Err(err(format!("unknown header key '{other}'"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(format!(
                "expected 2 columns (p_disp_kw q_disp_kvar), got {}",
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, DayAheadError> {
            s.parse()
                .map_err(|_| DayAheadError::Parse {
                    line: line_no,
                    msg: format!("bad number '{s}'"),
                })
        };
        p_disp_kw.push(parse(fields[0])?);
        q_disp_kvar.push(parse(fields[1])?);
    }
    let plan = DispatchPlan {
        start_utc: start.ok_or(DayAheadError::Parse {
            line: 0,
            msg: "missing 'start' header".into(),
        })?,
        step_s: step_s.ok_or(DayAheadError::Parse {
            line: 0,
            msg: "missing 'step_s' header".into(),
        })?,
        p_disp_kw,
        q_disp_kvar,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn load_plan(path: &Path) -> Result<DispatchPlan, DayAheadError> {
    let text = std::fs::read_to_string(path).map_err(|source| DayAheadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    plan_from_str(&text)
}

pub fn save_plan(path: &Path, plan: &DispatchPlan) -> Result<(), DayAheadError> {
    plan.validate()?;
    std::fs::write(path, plan_to_string(plan)).map_err(|source| DayAheadError::Io {
        path: path.display().to_string(),
        source,
    })
}
