//! Scenario construction for the scheduler and short-term point predictions
//! for the real-time controller.
//!
//! Day-ahead scenarios are realized historical series picked from an archive:
//! PV days by similarity of their stored hourly predictions to the target
//! prediction, demand days by calendar similarity. Real-time predictions use
//! irradiance/demand persistence over a trailing window.

mod file;

pub use file::{day_from_str, day_to_string, load_day, load_history, write_day};

use chrono::{Datelike, NaiveDate, Weekday};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

/// Steps per scheduling day on the 30-second grid.
pub const STEPS_PER_DAY: usize = 2880;
/// 30-second samples folded into one hourly prediction slot.
pub const STEPS_PER_HOUR: usize = 120;
/// Trailing samples (2 minutes at 30 s) averaged by the persistence forecast.
pub const PERSISTENCE_WINDOW: usize = 4;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("requested {requested} scenarios but only {available} days available")]
    TooManyScenarios { requested: usize, available: usize },
    #[error("persistence forecast needs at least one measurement")]
    EmptyWindow,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("day file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub fn of(date: NaiveDate) -> Self {
        match date.month() {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Autumn,
        }
    }
}

/// Calendar classification of a day, derived from its date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarTags {
    pub weekday: Weekday,
    pub is_weekend: bool,
    pub season: Season,
}

impl CalendarTags {
    pub fn of(date: NaiveDate) -> Self {
        let weekday = date.weekday();
        CalendarTags {
            weekday,
            is_weekend: matches!(weekday, Weekday::Sat | Weekday::Sun),
            season: Season::of(date),
        }
    }
}

/// One archived day: realized 30-s series plus the day-ahead hourly PV
/// predictions that were issued for it.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalDay {
    pub date: NaiveDate,
    /// Realized demand per load bus (kW / kVAr), injection-positive
    /// (consumption is negative).
    pub demand_p_kw: BTreeMap<u32, Vec<f64>>,
    pub demand_q_kvar: BTreeMap<u32, Vec<f64>>,
    /// Realized generation potential per plant name (kW, ≥ 0).
    pub pv_potential_kw: BTreeMap<String, Vec<f64>>,
    /// Hourly day-ahead potential predictions per plant (kW).
    pub pv_prediction_kw: BTreeMap<String, Vec<f64>>,
}

impl HistoricalDay {
    /// Checks internal shape consistency and returns the step count.
    pub fn validate(&self) -> Result<usize, ForecastError> {
        let mut steps: Option<usize> = None;
        let mut check = |len: usize, what: &str| -> Result<(), ForecastError> {
            match steps {
                None => {
                    steps = Some(len);
                    Ok(())
                }
                Some(s) if s == len => Ok(()),
                Some(s) => Err(ForecastError::Dimension(format!(
                    "{what} has {len} steps, expected {s}"
                ))),
            }
        };
        for (bus, series) in &self.demand_p_kw {
            check(series.len(), &format!("demand p at bus {bus}"))?;
        }
        for (bus, series) in &self.demand_q_kvar {
            check(series.len(), &format!("demand q at bus {bus}"))?;
        }
        if self.demand_p_kw.keys().ne(self.demand_q_kvar.keys()) {
            return Err(ForecastError::Dimension(
                "demand p and q cover different buses".into(),
            ));
        }
        for (plant, series) in &self.pv_potential_kw {
            check(series.len(), &format!("potential of {plant}"))?;
        }
        let steps = steps.ok_or(ForecastError::Dimension("day holds no series".into()))?;
        let hours = steps.div_ceil(STEPS_PER_HOUR);
        if self.pv_prediction_kw.keys().ne(self.pv_potential_kw.keys()) {
            return Err(ForecastError::Dimension(
                "prediction and potential cover different plants".into(),
            ));
        }
        for (plant, series) in &self.pv_prediction_kw {
            if series.len() != hours {
                return Err(ForecastError::Dimension(format!(
                    "prediction of {plant} has {} slots, expected {hours}",
                    series.len()
                )));
            }
        }
        Ok(steps)
    }

    pub fn tags(&self) -> CalendarTags {
        CalendarTags::of(self.date)
    }
}

/// Hourly target predictions per plant, the query key for PV-day selection.
pub type PlantPredictions = BTreeMap<String, Vec<f64>>;

/// One scheduling scenario: a demand realization paired with a PV-potential
/// realization, both exact copies of archived series.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub demand_p_kw: BTreeMap<u32, Vec<f64>>,
    pub demand_q_kvar: BTreeMap<u32, Vec<f64>>,
    pub pv_potential_kw: BTreeMap<String, Vec<f64>>,
    /// Archive dates the two halves were copied from (PV day, demand day).
    pub pv_day: NaiveDate,
    pub demand_day: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
    pub steps: usize,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

/// Emitted when demand-day selection had to widen its calendar filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackWarning {
    pub requested: usize,
    pub strict_matches: usize,
    pub relaxation: String,
}

fn distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks archive days by Euclidean distance between their stored hourly PV
/// predictions and the target prediction; returns the `s` closest realized
/// days, ties broken towards the older day.
pub fn select_pv_scenarios<'a>(
    target_prediction: &PlantPredictions,
    history: &'a [HistoricalDay],
    s: usize,
) -> Result<Vec<&'a HistoricalDay>, ForecastError> {
    if history.is_empty() {
        return Err(ForecastError::EmptyHistory);
    }
    if s > history.len() {
        return Err(ForecastError::TooManyScenarios {
            requested: s,
            available: history.len(),
        });
    }
    let mut scored: Vec<(f64, &HistoricalDay)> = Vec::with_capacity(history.len());
    for day in history {
        let mut d2 = 0.0;
        for (plant, target) in target_prediction {
            let stored = day.pv_prediction_kw.get(plant).ok_or_else(|| {
                ForecastError::Dimension(format!("day {} lacks plant {plant}", day.date))
            })?;
            if stored.len() != target.len() {
                return Err(ForecastError::Dimension(format!(
                    "prediction of {plant} on {}: {} slots vs target {}",
                    day.date,
                    stored.len(),
                    target.len()
                )));
            }
            d2 += distance_sq(stored, target);
        }
        scored.push((d2, day));
    }
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.date.cmp(&b.1.date))
    });
    Ok(scored.into_iter().take(s).map(|(_, d)| d).collect())
}

/// Picks `s` demand days matching the target's calendar class, most recent
/// first. The filter starts at (weekend-class, season) and widens to
/// weekend-class, then to the whole archive, reporting any widening.
pub fn select_demand_scenarios<'a>(
    target: &CalendarTags,
    history: &'a [HistoricalDay],
    s: usize,
) -> Result<(Vec<&'a HistoricalDay>, Option<FallbackWarning>), ForecastError> {
    if history.is_empty() {
        return Err(ForecastError::EmptyHistory);
    }
    if s > history.len() {
        return Err(ForecastError::TooManyScenarios {
            requested: s,
            available: history.len(),
        });
    }
    let mut by_recency: Vec<&HistoricalDay> = history.iter().collect();
    by_recency.sort_by(|a, b| b.date.cmp(&a.date));

    let tier1 = |d: &HistoricalDay| {
        let t = d.tags();
        t.is_weekend == target.is_weekend && t.season == target.season
    };
    let tier2 = |d: &HistoricalDay| d.tags().is_weekend == target.is_weekend;

    let mut picked: Vec<&HistoricalDay> = by_recency
        .iter()
        .copied()
        .filter(|d| tier1(d))
        .take(s)
        .collect();
    let strict_matches = picked.len();
    let mut relaxation = None;
    if picked.len() < s {
        relaxation = Some("widened to same weekend class across seasons".to_string());
        for d in by_recency.iter().copied().filter(|d| tier2(d) && !tier1(d)) {
            if picked.len() == s {
                break;
            }
            picked.push(d);
        }
    }
    if picked.len() < s {
        relaxation = Some("widened to the whole archive".to_string());
        for d in by_recency.iter().copied().filter(|d| !tier2(d)) {
            if picked.len() == s {
                break;
            }
            picked.push(d);
        }
    }
    let warning = relaxation.map(|r| FallbackWarning {
        requested: s,
        strict_matches,
        relaxation: r,
    });
    Ok((picked, warning))
}

/// Zips PV and demand day selections of equal length into scenarios; series
/// are copied verbatim from the archive.
pub fn pair_scenarios(
    pv_days: &[&HistoricalDay],
    demand_days: &[&HistoricalDay],
) -> Result<ScenarioSet, ForecastError> {
    if pv_days.len() != demand_days.len() {
        return Err(ForecastError::Dimension(format!(
            "{} PV days vs {} demand days",
            pv_days.len(),
            demand_days.len()
        )));
    }
    if pv_days.is_empty() {
        return Err(ForecastError::EmptyHistory);
    }
    let steps = pv_days[0].validate()?;
    let mut scenarios = Vec::with_capacity(pv_days.len());
    for (pv, dem) in pv_days.iter().zip(demand_days) {
        if pv.validate()? != steps || dem.validate()? != steps {
            return Err(ForecastError::Dimension(
                "scenario days disagree on step count".into(),
            ));
        }
        scenarios.push(Scenario {
            demand_p_kw: dem.demand_p_kw.clone(),
            demand_q_kvar: dem.demand_q_kvar.clone(),
            pv_potential_kw: pv.pv_potential_kw.clone(),
            pv_day: pv.date,
            demand_day: dem.date,
        });
    }
    Ok(ScenarioSet { scenarios, steps })
}

/// Convenience wrapper: select PV days by prediction distance, demand days by
/// calendar, and pair them index-wise.
pub fn build_scenarios(
    target_prediction: &PlantPredictions,
    target_tags: &CalendarTags,
    history: &[HistoricalDay],
    s: usize,
) -> Result<(ScenarioSet, Option<FallbackWarning>), ForecastError> {
    let pv_days = select_pv_scenarios(target_prediction, history, s)?;
    let (demand_days, warning) = select_demand_scenarios(target_tags, history, s)?;
    Ok((pair_scenarios(&pv_days, &demand_days)?, warning))
}

/// Constant-ahead prediction: the mean of the trailing 2-minute window
/// (up to 4 samples at 30 s), repeated over the horizon.
pub fn persistence_forecast(recent: &[f64], horizon: usize) -> Result<Vec<f64>, ForecastError> {
    if recent.is_empty() {
        return Err(ForecastError::EmptyWindow);
    }
    let tail = &recent[recent.len().saturating_sub(PERSISTENCE_WINDOW)..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(vec![mean; horizon])
}
