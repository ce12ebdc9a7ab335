//! Columnar text format for archived days.
//!
//! Layout (comments with `#`, blank lines ignored):
//!
//! ```text
//! date = 2025-06-03
//! predict pv1 = 0 0 1.4 3.2 ...      # hourly day-ahead potential, kW
//! columns = demand_p:3 demand_q:3 potential:pv1
//! -12.5 -3.2 0.0                     # one row per 30-s step
//! ...
//! ```
//!
//! `demand_p:<bus>` / `demand_q:<bus>` columns are injection-positive kW /
//! kVAr; `potential:<plant>` columns are non-negative kW.

use super::{ForecastError, HistoricalDay};
use chrono::NaiveDate;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

enum Column {
    DemandP(u32),
    DemandQ(u32),
    Potential(String),
}

pub fn day_from_str(text: &str) -> Result<HistoricalDay, ForecastError> {
    let mut date: Option<NaiveDate> = None;
    let mut predictions: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut columns: Option<Vec<Column>> = None;
    let mut demand_p: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut demand_q: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut potential: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if columns.is_none() {
            let (key, value) = line.split_once('=').ok_or_else(|| ForecastError::Parse {
                line: line_no,
                msg: format!("expected `key = value` before the column header, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "date" {
                date = Some(value.parse().map_err(|_| ForecastError::Parse {
                    line: line_no,
                    msg: format!("bad date `{value}` (expected YYYY-MM-DD)"),
                })?);
            } else if let Some(plant) = key.strip_prefix("predict ") {
                let series = parse_floats(value, line_no)?;
                predictions.insert(plant.trim().to_string(), series);
            } else if key == "columns" {
                let mut cols = Vec::new();
                for spec in value.split_whitespace() {
                    let (kind, arg) = spec.split_once(':').ok_or_else(|| ForecastError::Parse {
                        line: line_no,
                        msg: format!("bad column spec `{spec}` (expected kind:arg)"),
                    })?;
                    let col = match kind {
                        "demand_p" | "demand_q" => {
                            let bus = arg.parse().map_err(|_| ForecastError::Parse {
                                line: line_no,
                                msg: format!("bad bus id `{arg}`"),
                            })?;
                            if kind == "demand_p" {
                                demand_p.insert(bus, Vec::new());
                                Column::DemandP(bus)
                            } else {
                                demand_q.insert(bus, Vec::new());
                                Column::DemandQ(bus)
                            }
                        }
                        "potential" => {
                            potential.insert(arg.to_string(), Vec::new());
                            Column::Potential(arg.to_string())
                        }
                        other => {
                            return Err(ForecastError::Parse {
                                line: line_no,
                                msg: format!("unknown column kind `{other}`"),
                            })
                        }
                    };
                    cols.push(col);
                }
                columns = Some(cols);
            } else {
                return Err(ForecastError::Parse {
                    line: line_no,
                    msg: format!("unknown key `{key}`"),
                });
            }
            continue;
        }
        // Data row.
        let cols = columns.as_ref().unwrap();
        let values = parse_floats(line, line_no)?;
        if values.len() != cols.len() {
            return Err(ForecastError::Parse {
                line: line_no,
                msg: format!("row has {} values, expected {}", values.len(), cols.len()),
            });
        }
        for (col, v) in cols.iter().zip(values) {
            match col {
                Column::DemandP(bus) => demand_p.get_mut(bus).unwrap().push(v),
                Column::DemandQ(bus) => demand_q.get_mut(bus).unwrap().push(v),
                Column::Potential(p) => potential.get_mut(p).unwrap().push(v),
            }
        }
    }

    let date = date.ok_or(ForecastError::Parse {
        line: 0,
        msg: "missing `date = …` header".into(),
    })?;
    if columns.is_none() {
        return Err(ForecastError::Parse {
            line: 0,
            msg: "missing `columns = …` header".into(),
        });
    }
    let day = HistoricalDay {
        date,
        demand_p_kw: demand_p,
        demand_q_kvar: demand_q,
        pv_potential_kw: potential,
        pv_prediction_kw: predictions,
    };
    day.validate()?;
    Ok(day)
}

fn parse_floats(text: &str, line_no: usize) -> Result<Vec<f64>, ForecastError> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| ForecastError::Parse {
                line: line_no,
                msg: format!("not a number: `{tok}`"),
            })
        })
        .collect()
}

pub fn day_to_string(day: &HistoricalDay) -> Result<String, ForecastError> {
    let steps = day.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "date = {}", day.date);
    for (plant, pred) in &day.pv_prediction_kw {
        let joined: Vec<String> = pred.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "predict {plant} = {}", joined.join(" "));
    }
    let mut specs: Vec<String> = Vec::new();
    for bus in day.demand_p_kw.keys() {
        specs.push(format!("demand_p:{bus}"));
        specs.push(format!("demand_q:{bus}"));
    }
    for plant in day.pv_potential_kw.keys() {
        specs.push(format!("potential:{plant}"));
    }
    let _ = writeln!(out, "columns = {}", specs.join(" "));
    for t in 0..steps {
        let mut row: Vec<String> = Vec::with_capacity(specs.len());
        for bus in day.demand_p_kw.keys() {
            row.push(day.demand_p_kw[bus][t].to_string());
            row.push(day.demand_q_kvar[bus][t].to_string());
        }
        for plant in day.pv_potential_kw.keys() {
            row.push(day.pv_potential_kw[plant][t].to_string());
        }
        let _ = writeln!(out, "{}", row.join(" "));
    }
    Ok(out)
}

pub fn load_day(path: &Path) -> Result<HistoricalDay, ForecastError> {
    let text = std::fs::read_to_string(path).map_err(|source| ForecastError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    day_from_str(&text)
}

/// Loads every `*.day` file in a directory, sorted by date ascending.
pub fn load_history(dir: &Path) -> Result<Vec<HistoricalDay>, ForecastError> {
    let entries = std::fs::read_dir(dir).map_err(|source| ForecastError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut days = Vec::new();
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "day"))
        .collect();
    paths.sort();
    for path in paths {
        days.push(load_day(&path)?);
    }
    days.sort_by_key(|d| d.date);
    Ok(days)
}

pub fn write_day(dir: &Path, day: &HistoricalDay) -> Result<std::path::PathBuf, ForecastError> {
    let text = day_to_string(day)?;
    let path = dir.join(format!("{}.day", day.date));
    std::fs::write(&path, text).map_err(|source| ForecastError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
