//! Mean, median and cross-date interpolation imputation, plus controlled
//! missing-value injection.
//!
//! Statistics are indexed by (station, timestamp-of-day) and built from the
//! observed cells of the training days only.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FlowDataset, POINTS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mean,
    Median,
    #[serde(rename = "interp")]
    Interpolation,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mean, Method::Median, Method::Interpolation];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Median => "median",
            Method::Interpolation => "interp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Method::Mean),
            "median" => Ok(Method::Median),
            "interp" | "interpolation" => Ok(Method::Interpolation),
            _ => Err(Error::Config(format!(
                "unknown imputation method {s:?}; expected mean, median or interp"
            ))),
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median of a non-empty slice; even counts average the middle pair.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

/// Observations of one (station, timestamp-of-day) cell keyed by day number.
#[derive(Clone, Debug, Default, PartialEq)]
struct History {
    days: Vec<i64>,
    values: Vec<f64>,
}

impl History {
    /// Linear in the day number between the nearest observed dates,
    /// clamped to the first/last observation outside them.
    fn interpolate(&self, day: i64) -> Option<f64> {
        let n = self.days.len();
        if n == 0 {
            return None;
        }
        if day <= self.days[0] {
            return Some(self.values[0]);
        }
        if day >= self.days[n - 1] {
            return Some(self.values[n - 1]);
        }
        let hi = self.days.partition_point(|&d| d < day);
        if self.days[hi] == day {
            return Some(self.values[hi]);
        }
        let lo = hi - 1;
        let (d0, d1) = (self.days[lo] as f64, self.days[hi] as f64);
        let w = (day as f64 - d0) / (d1 - d0);
        Some(self.values[lo] + w * (self.values[hi] - self.values[lo]))
    }
}

/// Fill rules fitted on the training range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationModel {
    method: Method,
    stations: usize,
    /// Mean/median per (station, timestamp-of-day), station-major.
    table: Vec<f64>,
    /// Cells of `table` that came from the station-wide fallback.
    fallback: Vec<bool>,
    /// Interpolation only: per (station, timestamp-of-day) observations.
    history: Vec<History>,
}

fn day_number(date: NaiveDate) -> i64 {
    date.signed_duration_since(NaiveDate::MIN).num_days()
}

/// Fits the fill rules on observed cells of `train_days`.
///
/// A (station, timestamp-of-day) cell without any training observation
/// falls back to the station's statistic over all its training values; a
/// station with no training observations at all is an error.
pub fn fit(method: Method, ds: &FlowDataset, train_days: Range<usize>) -> Result<ImputationModel> {
    if train_days.is_empty() || train_days.end > ds.num_days() {
        return Err(Error::Data(format!(
            "training range {train_days:?} outside 0..{}",
            ds.num_days()
        )));
    }
    let p = ds.num_stations();
    let stat = |v: &[f64]| match method {
        Method::Median => median(v),
        _ => mean(v),
    };
    let mut table = vec![0.0; p * POINTS_PER_DAY];
    let mut fallback = vec![false; p * POINTS_PER_DAY];
    let mut history = Vec::new();
    for s in 0..p {
        let all: Vec<f64> = train_days
            .clone()
            .flat_map(|d| (0..POINTS_PER_DAY).map(move |tau| d * POINTS_PER_DAY + tau))
            .filter_map(|t| ds.get(s, t))
            .collect();
        if all.is_empty() {
            return Err(Error::Data(format!(
                "station {} has no observed training values",
                ds.stations()[s]
            )));
        }
        let station_stat = stat(&all);
        for tau in 0..POINTS_PER_DAY {
            let mut cell = History::default();
            for d in train_days.clone() {
                if let Some(v) = ds.get(s, d * POINTS_PER_DAY + tau) {
                    cell.days.push(day_number(ds.date_of_day(d)));
                    cell.values.push(v);
                }
            }
            let i = s * POINTS_PER_DAY + tau;
            if cell.values.is_empty() {
                table[i] = station_stat;
                fallback[i] = true;
            } else {
                table[i] = stat(&cell.values);
            }
            if method == Method::Interpolation {
                history.push(cell);
            }
        }
    }
    Ok(ImputationModel {
        method,
        stations: p,
        table,
        fallback,
        history,
    })
}

impl ImputationModel {
    pub fn method(&self) -> Method {
        self.method
    }

    /// Mean/median table entry (the interpolation fallback for empty cells).
    pub fn table_value(&self, station: usize, tau: usize) -> f64 {
        self.table[station * POINTS_PER_DAY + tau]
    }

    pub fn used_fallback(&self, station: usize, tau: usize) -> bool {
        self.fallback[station * POINTS_PER_DAY + tau]
    }

    /// Fill value for a cell on `date` at timestamp-of-day `tau`.
    pub fn fill_value(&self, station: usize, tau: usize, date: NaiveDate) -> f64 {
        match self.method {
            Method::Interpolation => self.history[station * POINTS_PER_DAY + tau]
                .interpolate(day_number(date))
                .unwrap_or_else(|| self.table_value(station, tau)),
            _ => self.table_value(station, tau),
        }
    }

    /// Fills every missing cell; observed cells are left untouched.
    pub fn impute(&self, ds: &FlowDataset) -> Result<FlowDataset> {
        if ds.num_stations() != self.stations {
            return Err(Error::Data(format!(
                "imputation model covers {} stations, dataset has {}",
                self.stations,
                ds.num_stations()
            )));
        }
        let mut out = ds.clone();
        for s in 0..ds.num_stations() {
            for t in 0..ds.len() {
                if !ds.observed(s, t) {
                    let date = ds.date_of_day(t / POINTS_PER_DAY);
                    out.set(s, t, Some(self.fill_value(s, t % POINTS_PER_DAY, date)));
                }
            }
        }
        Ok(out)
    }
}

pub fn impute(model: &ImputationModel, ds: &FlowDataset) -> Result<FlowDataset> {
    model.impute(ds)
}

/// Cells eligible for injection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Only timestamps of the given days (typically the test split).
    Days(Range<usize>),
    AllData,
}

impl Scope {
    pub fn label(&self) -> &'static str {
        match self {
            Scope::Days(_) => "test-only",
            Scope::AllData => "all-data",
        }
    }
}

/// Record of one injection run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MissingPattern {
    pub ratio: f64,
    pub seed: u64,
    pub scope: String,
    pub cell_count: usize,
    /// `(station, timestamp)` pairs forced missing, sorted.
    #[serde(skip)]
    pub cells: Vec<(usize, usize)>,
}

impl MissingPattern {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Removes `round(ratio * cells_in_scope)` currently observed cells chosen
/// uniformly without replacement.
pub fn inject_missing(
    ds: &FlowDataset,
    ratio: f64,
    seed: u64,
    scope: &Scope,
) -> Result<(FlowDataset, MissingPattern)> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::Config(format!(
            "missing ratio {ratio} outside [0, 0.5]"
        )));
    }
    let times = match scope {
        Scope::AllData => 0..ds.len(),
        Scope::Days(days) => {
            if days.end > ds.num_days() {
                return Err(Error::Data(format!("scope {days:?} outside dataset")));
            }
            days.start * POINTS_PER_DAY..days.end * POINTS_PER_DAY
        }
    };
    let scoped = ds.num_stations() * times.len();
    let count = (ratio * scoped as f64).round() as usize;
    let candidates: Vec<(usize, usize)> = (0..ds.num_stations())
        .flat_map(|s| times.clone().map(move |t| (s, t)))
        .filter(|&(s, t)| ds.observed(s, t))
        .collect();
    if count > candidates.len() {
        return Err(Error::Data(format!(
            "cannot remove {count} cells: only {} observed in scope",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), count).into_vec();
    picked.sort_unstable();
    let cells: Vec<(usize, usize)> = picked.into_iter().map(|i| candidates[i]).collect();
    let mut out = ds.clone();
    for &(s, t) in &cells {
        out.set(s, t, None);
    }
    Ok((
        out,
        MissingPattern {
            ratio,
            seed,
            scope: scope.label().to_string(),
            cell_count: cells.len(),
            cells,
        },
    ))
}
