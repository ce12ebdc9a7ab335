//! Controllable resources: battery storage and PV plants — parameters,
//! dynamics, capability sets, and the convex fragments both control layers
//! build their problems from.
//!
//! All quantities are in natural units (kW, kVAr, kVA, kWh); positive active
//! power injects into the grid.

mod battery;
mod pv;

pub use battery::{
    battery_dayahead_blocks, battery_rt_problem, battery_soe_step, BatteryDayAheadBlocks,
    BatteryParams, BatteryState, BatteryVars,
};
pub use pv::{pv_constraint_block, pv_cost_block, pv_rt_problem, PvParams, PvPotential, PvVars};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("invalid resource parameters: {0}")]
    InvalidParams(String),
    #[error("battery SOE {soe_kwh} kWh outside usable band [{lo_kwh}, {hi_kwh}] kWh")]
    StateOutOfBounds {
        soe_kwh: f64,
        lo_kwh: f64,
        hi_kwh: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("resource file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One (p, q) actuation request for a resource at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceSetpoint {
    pub p_kw: f64,
    pub q_kvar: f64,
}

impl ResourceSetpoint {
    pub fn magnitude_kva(&self) -> f64 {
        self.p_kw.hypot(self.q_kvar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CapabilityIssue {
    /// Apparent power exceeds the converter rating.
    RatingExceeded { by_kva: f64 },
    /// Generation below zero on a generation-only device.
    NegativeGeneration { p_kw: f64 },
    /// Reactive setpoint on a converter that cannot produce it.
    ReactiveUnsupported { q_kvar: f64 },
}

/// Margin report of a setpoint against a resource's time-invariant
/// capability set; a margin of exactly zero is on the boundary and feasible.
#[derive(Debug, Clone)]
pub struct CapabilityReport {
    /// Rating-disk margin: rating − |s| (kVA); negative means violation.
    pub rating_margin_kva: f64,
    pub issues: Vec<CapabilityIssue>,
}

impl CapabilityReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResourceKind {
    Battery {
        params: BatteryParams,
        initial_soe_kwh: f64,
    },
    Pv(PvParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resource {
    pub name: String,
    pub kind: ResourceKind,
}

impl Resource {
    pub fn bus(&self) -> u32 {
        match &self.kind {
            ResourceKind::Battery { params, .. } => params.bus,
            ResourceKind::Pv(p) => p.bus,
        }
    }

    pub fn rating_kva(&self) -> f64 {
        match &self.kind {
            ResourceKind::Battery { params, .. } => params.s_max_kva,
            ResourceKind::Pv(p) => p.s_max_kva,
        }
    }
}

pub fn check_capability(sp: ResourceSetpoint, kind: &ResourceKind) -> CapabilityReport {
    let rating = match kind {
        ResourceKind::Battery { params, .. } => params.s_max_kva,
        ResourceKind::Pv(p) => p.s_max_kva,
    };
    let mut issues = Vec::new();
    let rating_margin_kva = rating - sp.magnitude_kva();
    if rating_margin_kva < 0.0 {
        issues.push(CapabilityIssue::RatingExceeded {
            by_kva: -rating_margin_kva,
        });
    }
    if let ResourceKind::Pv(p) = kind {
        if sp.p_kw < 0.0 {
            issues.push(CapabilityIssue::NegativeGeneration { p_kw: sp.p_kw });
        }
        if !p.reactive_capable && sp.q_kvar != 0.0 {
            issues.push(CapabilityIssue::ReactiveUnsupported { q_kvar: sp.q_kvar });
        }
    }
    CapabilityReport {
        rating_margin_kva,
        issues,
    }
}

/// The resource fleet attached to a feeder, in file order. At most one
/// battery is assumed by the single-plan pipeline; sweeps construct their own
/// fleets programmatically.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceSet {
    pub resources: Vec<Resource>,
}

impl ResourceSet {
    pub fn new(resources: Vec<Resource>) -> Result<Self, ResourceError> {
        let mut seen = std::collections::HashSet::new();
        for r in &resources {
            if !seen.insert(r.name.clone()) {
                return Err(ResourceError::InvalidParams(format!(
                    "duplicate resource name {}",
                    r.name
                )));
            }
            match &r.kind {
                ResourceKind::Battery {
                    params,
                    initial_soe_kwh,
                } => {
                    params.validate()?;
                    if !params.soe_in_bounds(*initial_soe_kwh) {
                        return Err(ResourceError::StateOutOfBounds {
                            soe_kwh: *initial_soe_kwh,
                            lo_kwh: params.soe_min_kwh(),
                            hi_kwh: params.soe_max_kwh(),
                        });
                    }
                }
                ResourceKind::Pv(p) => p.validate()?,
            }
        }
        Ok(ResourceSet { resources })
    }

    pub fn batteries(&self) -> impl Iterator<Item = (&Resource, &BatteryParams, f64)> {
        self.resources.iter().filter_map(|r| match &r.kind {
            ResourceKind::Battery {
                params,
                initial_soe_kwh,
            } => Some((r, params, *initial_soe_kwh)),
            _ => None,
        })
    }

    pub fn pvs(&self) -> impl Iterator<Item = (&Resource, &PvParams)> {
        self.resources.iter().filter_map(|r| match &r.kind {
            ResourceKind::Pv(p) => Some((r, p)),
            _ => None,
        })
    }

    pub fn len(&self) -> usize {
        self.resources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resources.is_empty()
    }

    pub fn from_file(path: &Path) -> Result<Self, ResourceError> {
        let text = std::fs::read_to_string(path).map_err(|source| ResourceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str_contents(&text)
    }

    /// Parses the sectioned resource format: one `[battery NAME]` or
    /// `[pv NAME]` header per unit followed by `key = value` lines.
    pub fn from_str_contents(text: &str) -> Result<Self, ResourceError> {
        enum Pending {
            Battery {
                name: String,
                line: usize,
                fields: Fields,
            },
            Pv {
                name: String,
                line: usize,
                fields: Fields,
            },
        }
        let mut resources = Vec::new();
        let mut pending: Option<Pending> = None;

        fn finish(pending: Pending) -> Result<Resource, ResourceError> {
            match pending {
                Pending::Battery { name, line, fields } => {
                    let params = BatteryParams {
                        bus: fields.require(line, "bus")? as u32,
                        capacity_kwh: fields.require(line, "capacity_kwh")?,
                        s_max_kva: fields.require(line, "s_max_kva")?,
                        backoff: fields.optional("backoff").unwrap_or(0.1),
                        t_s_s: fields.optional("t_s_s").unwrap_or(30.0),
                        efficiency: fields.optional("efficiency").unwrap_or(1.0),
                    };
                    let initial_soe_kwh = fields.require(line, "initial_soe_kwh")?;
                    fields.reject_unknown(
                        line,
                        &[
                            "bus",
                            "capacity_kwh",
                            "s_max_kva",
                            "backoff",
                            "t_s_s",
                            "efficiency",
                            "initial_soe_kwh",
                        ],
                    )?;
                    Ok(Resource {
                        name,
                        kind: ResourceKind::Battery {
                            params,
                            initial_soe_kwh,
                        },
                    })
                }
                Pending::Pv { name, line, fields } => {
                    let params = PvParams {
                        bus: fields.require(line, "bus")? as u32,
                        s_max_kva: fields.require(line, "s_max_kva")?,
                        reactive_capable: fields.flag(line, "reactive")?.unwrap_or(false),
                    };
                    fields.reject_unknown(line, &["bus", "s_max_kva", "reactive"])?;
                    Ok(Resource {
                        name,
                        kind: ResourceKind::Pv(params),
                    })
                }
            }
        }

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if let Some(p) = pending.take() {
                    resources.push(finish(p)?);
                }
                let mut parts = header.split_whitespace();
                let kind = parts.next().unwrap_or("");
                let name = parts.next().unwrap_or("").to_string();
                if name.is_empty() || parts.next().is_some() {
                    return Err(ResourceError::Parse {
                        line: line_no,
                        msg: format!("expected `[battery NAME]` or `[pv NAME]`, got `[{header}]`"),
                    });
                }
                pending = Some(match kind {
                    "battery" => Pending::Battery {
                        name,
                        line: line_no,
                        fields: Fields::default(),
                    },
                    "pv" => Pending::Pv {
                        name,
                        line: line_no,
                        fields: Fields::default(),
                    },
                    other => {
                        return Err(ResourceError::Parse {
                            line: line_no,
                            msg: format!("unknown resource type `{other}`"),
                        })
                    }
                });
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ResourceError::Parse {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let fields = match &mut pending {
                Some(Pending::Battery { fields, .. }) | Some(Pending::Pv { fields, .. }) => fields,
                None => {
                    return Err(ResourceError::Parse {
                        line: line_no,
                        msg: "key before any resource header".into(),
                    })
                }
            };
            fields.insert(line_no, key.trim(), value.trim())?;
        }
        if let Some(p) = pending.take() {
            resources.push(finish(p)?);
        }
        ResourceSet::new(resources)
    }

    /// Serializes back to the sectioned file format (used by the synthetic
    /// fixture generator).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for r in &self.resources {
            match &r.kind {
                ResourceKind::Battery {
                    params,
                    initial_soe_kwh,
                } => {
                    let _ = writeln!(out, "[battery {}]", r.name);
                    let _ = writeln!(out, "bus = {}", params.bus);
                    let _ = writeln!(out, "capacity_kwh = {}", params.capacity_kwh);
                    let _ = writeln!(out, "s_max_kva = {}", params.s_max_kva);
                    let _ = writeln!(out, "backoff = {}", params.backoff);
                    let _ = writeln!(out, "t_s_s = {}", params.t_s_s);
                    let _ = writeln!(out, "efficiency = {}", params.efficiency);
                    let _ = writeln!(out, "initial_soe_kwh = {initial_soe_kwh}");
                }
                ResourceKind::Pv(params) => {
                    let _ = writeln!(out, "[pv {}]", r.name);
                    let _ = writeln!(out, "bus = {}", params.bus);
                    let _ = writeln!(out, "s_max_kva = {}", params.s_max_kva);
                    let _ = writeln!(out, "reactive = {}", params.reactive_capable);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Key/value scratch space for one resource section during parsing.
#[derive(Default)]
struct Fields {
    entries: Vec<(String, String, usize)>,
}

impl Fields {
    fn insert(&mut self, line: usize, key: &str, value: &str) -> Result<(), ResourceError> {
        if self.entries.iter().any(|(k, _, _)| k == key) {
            return Err(ResourceError::Parse {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        self.entries
            .push((key.to_string(), value.to_string(), line));
        Ok(())
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    fn require(&self, section_line: usize, key: &str) -> Result<f64, ResourceError> {
        let (value, line) = self.get(key).ok_or_else(|| ResourceError::Parse {
            line: section_line,
            msg: format!("missing required key `{key}`"),
        })?;
        value.parse::<f64>().map_err(|_| ResourceError::Parse {
            line,
            msg: format!("`{key}` is not a number: `{value}`"),
        })
    }

    fn optional(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|(v, _)| v.parse().ok())
    }

    fn flag(&self, _section_line: usize, key: &str) -> Result<Option<bool>, ResourceError> {
        match self.get(key) {
            None => Ok(None),
            Some(("true", _)) => Ok(Some(true)),
            Some(("false", _)) => Ok(Some(false)),
            Some((other, line)) => Err(ResourceError::Parse {
                line,
                msg: format!("`{key}` must be true or false, got `{other}`"),
            }),
        }
    }

    fn reject_unknown(&self, _section_line: usize, known: &[&str]) -> Result<(), ResourceError> {
        for (k, _, line) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(ResourceError::Parse {
                    line: *line,
                    msg: format!("unknown key `{k}`"),
                });
            }
        }
        Ok(())
    }
}
