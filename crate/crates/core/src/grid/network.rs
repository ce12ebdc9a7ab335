//! Network data model and the structured-text loader.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::GridError;

/// Base quantities for the per-unit system.  The current base follows from
/// them as `i_base = s_base / v_base` (single-phase equivalent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Base {
    pub v_base_v: f64,
    pub s_base_va: f64,
    pub slack_v_pu: f64,
}

impl Base {
    pub fn z_base_ohm(&self) -> f64 {
        self.v_base_v * self.v_base_v / self.s_base_va
    }

    pub fn i_base_a(&self) -> f64 {
        self.s_base_va / self.v_base_v
    }

    pub fn power_to_pu(&self, kw: f64) -> f64 {
        kw * 1e3 / self.s_base_va
    }

    pub fn power_to_kw(&self, pu: f64) -> f64 {
        pu * self.s_base_va / 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: u32,
    pub to: u32,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub ampacity_a: f64,
}

/// Validated feeder model.  Construction enforces: exactly one slack bus, a
/// connected graph, strictly positive series resistance (every line is lossy)
/// and positive ampacity.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub base: Base,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    index_of: BTreeMap<u32, usize>,
    slack: usize,
    /// Dense indices of non-slack buses, ascending; fixes the layout of
    /// injection vectors and of the affine grid model.
    non_slack: Vec<usize>,
    admittance: DMatrix<Complex64>,
}

impl NetworkModel {
    pub fn new(base: Base, buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self, GridError> {
        if !(base.v_base_v > 0.0 && base.s_base_va > 0.0 && base.slack_v_pu > 0.0) {
            return Err(GridError::Structure(
                "base quantities must be strictly positive".into(),
            ));
        }
        if buses.is_empty() {
            return Err(GridError::Structure("no buses".into()));
        }
        let mut index_of = BTreeMap::new();
        for (i, b) in buses.iter().enumerate() {
            if index_of.insert(b.id, i).is_some() {
                return Err(GridError::Structure(format!("duplicate bus id {}", b.id)));
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(i, _)| i)
            .collect();
        let slack = match slacks.as_slice() {
            [one] => *one,
            other => {
                return Err(GridError::Structure(format!(
                    "expected exactly one slack bus, found {}",
                    other.len()
                )))
            }
        };
        for l in &lines {
            if l.from == l.to {
                return Err(GridError::Structure(format!(
                    "line {}-{} is a self-loop",
                    l.from, l.to
                )));
            }
            for end in [l.from, l.to] {
                if !index_of.contains_key(&end) {
                    return Err(GridError::Structure(format!(
                        "line {}-{} references unknown bus {end}",
                        l.from, l.to
                    )));
                }
            }
            if l.r_ohm <= 0.0 {
                return Err(GridError::Structure(format!(
                    "line {}-{}: resistance must be strictly positive (got {})",
                    l.from, l.to, l.r_ohm
                )));
            }
            if l.ampacity_a <= 0.0 {
                return Err(GridError::Structure(format!(
                    "line {}-{}: ampacity must be positive (got {})",
                    l.from, l.to, l.ampacity_a
                )));
            }
        }
        // Connectivity sweep from the slack.
        let n = buses.len();
        let mut reached = vec![false; n];
        let mut stack = vec![slack];
        reached[slack] = true;
        while let Some(i) = stack.pop() {
            for l in &lines {
                let (a, b) = (index_of[&l.from], index_of[&l.to]);
                for (u, v) in [(a, b), (b, a)] {
                    if u == i && !reached[v] {
                        reached[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        if let Some(missing) = reached.iter().position(|r| !r) {
            return Err(GridError::Structure(format!(
                "bus {} is not connected to the slack",
                buses[missing].id
            )));
        }

        let non_slack: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
        let admittance = build_admittance(&base, &buses, &lines, &index_of);
        Ok(NetworkModel {
            base,
            buses,
            lines,
            index_of,
            slack,
            non_slack,
            admittance,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str_contents(&text)
    }

    /// Parses the sectioned network format (`[base]`, `[buses]`, `[lines]`;
    /// `#` starts a comment).
    pub fn from_str_contents(text: &str) -> Result<Self, GridError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Base,
            Buses,
            Lines,
        }
        let mut section = Section::None;
        let mut v_base = None;
        let mut s_base = None;
        let mut slack_v = None;
        let mut buses = Vec::new();
        let mut lines = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[base]" => {
                    section = Section::Base;
                    continue;
                }
                "[buses]" => {
                    section = Section::Buses;
                    continue;
                }
                "[lines]" => {
                    section = Section::Lines;
                    continue;
                }
                _ => {}
            }
            let err = |msg: String| GridError::Parse { line: line_no, msg };
            match section {
                Section::None => {
                    return Err(err(format!("content before any section header: '{line}'")))
                }
                Section::Base => {
                    let (key, value) = line
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
                    let value: f64 = value
                        .trim()
                        .parse()
                        .map_err(|_| err(format!("bad number '{}'", value.trim())))?;
                    match key.trim() {
                        "v_base_v" => v_base = Some(value),
                        "s_base_va" => s_base = Some(value),
                        "slack_v_pu" => slack_v = Some(value),
                        other => return Err(err(format!("unknown base key '{other}'"))),
                    }
                }
                Section::Buses => {
                    let mut it = line.split_whitespace();
                    let id: u32 = it
                        .next()
                        .unwrap()
                        .parse()
                        .map_err(|_| err("bad bus id".into()))?;
                    let kind = match it.next() {
                        Some("slack") => BusKind::Slack,
                        Some("pq") => BusKind::Pq,
                        other => {
                            return Err(err(format!(
                                "bus type must be 'slack' or 'pq', got {other:?}"
                            )))
                        }
                    };
                    buses.push(Bus { id, kind });
                }
                Section::Lines => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != 5 {
                        return Err(err(format!(
                            "line rows need 5 fields (from to r_ohm x_ohm ampacity_a), got {}",
                            fields.len()
                        )));
                    }
                    let parse_f = |s: &str| -> Result<f64, GridError> {
                        s.parse().map_err(|_| GridError::Parse {
                            line: line_no,
                            msg: format!("bad number '{s}'"),
                        })
                    };
                    lines.push(Line {
                        from: fields[0].parse().map_err(|_| GridError::Parse {
                            line: line_no,
                            msg: "bad bus id".into(),
                        })?,
                        to: fields[1].parse().map_err(|_| GridError::Parse {
                            line: line_no,
                            msg: "bad bus id".into(),
                        })?,
                        r_ohm: parse_f(fields[2])?,
                        x_ohm: parse_f(fields[3])?,
                        ampacity_a: parse_f(fields[4])?,
                    });
                }
            }
        }
        let base = Base {
            v_base_v: v_base.ok_or(GridError::Parse {
                line: 0,
                msg: "missing v_base_v".into(),
            })?,
            s_base_va: s_base.ok_or(GridError::Parse {
                line: 0,
                msg: "missing s_base_va".into(),
            })?,
            slack_v_pu: slack_v.unwrap_or(1.0),
        };
        Self::new(base, buses, lines)
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    pub fn non_slack(&self) -> &[usize] {
        &self.non_slack
    }

    pub fn dense_index(&self, bus_id: u32) -> Option<usize> {
        self.index_of.get(&bus_id).copied()
    }

    /// Position of a (non-slack) bus in injection-vector layout.
    pub fn injection_index(&self, bus_id: u32) -> Option<usize> {
        let dense = self.dense_index(bus_id)?;
        self.non_slack.iter().position(|&i| i == dense)
    }

    pub fn admittance(&self) -> &DMatrix<Complex64> {
        &self.admittance
    }

    /// Series admittance of a line, per unit.
    pub fn line_admittance_pu(&self, l: usize) -> Complex64 {
        let line = &self.lines[l];
        let z = Complex64::new(line.r_ohm, line.x_ohm) / self.base.z_base_ohm();
        z.inv()
    }

    pub fn line_endpoints_dense(&self, l: usize) -> (usize, usize) {
        let line = &self.lines[l];
        (self.index_of[&line.from], self.index_of[&line.to])
    }

    /// Line ampacities in per-unit current.
    pub fn ampacity_pu(&self) -> Vec<f64> {
        self.lines
            .iter()
            .map(|l| l.ampacity_a / self.base.i_base_a())
            .collect()
    }
}

fn build_admittance(
    base: &Base,
    buses: &[Bus],
    lines: &[Line],
    index_of: &BTreeMap<u32, usize>,
) -> DMatrix<Complex64> {
    let n = buses.len();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for l in lines {
        let z = Complex64::new(l.r_ohm, l.x_ohm) / base.z_base_ohm();
        let ya = z.inv();
        let (a, b) = (index_of[&l.from], index_of[&l.to]);
        y[(a, a)] += ya;
        y[(b, b)] += ya;
        y[(a, b)] -= ya;
        y[(b, a)] -= ya;
    }
    y
}
