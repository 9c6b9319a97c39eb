//! Flow tables, cleaning, standardisation, day splits and window extraction.

use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Five-minute samples per calendar day.
pub const POINTS_PER_DAY: usize = 288;

/// Days the weekly lag reaches back.
pub const WEEK_DAYS: usize = 7;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Per-station flow series with an explicit observation mask.
///
/// Missing cells hold `NaN` in `flows` and `false` in `mask`.
#[derive(Clone, Debug)]
pub struct FlowDataset {
    stations: Vec<String>,
    lane: Option<String>,
    start: NaiveDate,
    len: usize,
    flows: Vec<f64>,
    mask: Vec<bool>,
}

impl PartialEq for FlowDataset {
    fn eq(&self, other: &Self) -> bool {
        self.stations == other.stations
            && self.lane == other.lane
            && self.start == other.start
            && self.len == other.len
            && self.mask == other.mask
            && self
                .flows
                .iter()
                .zip(&other.flows)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FlowDataset {
    /// `flows` is station-major: `flows[s * len + t]`. Entries whose mask is
    /// false are stored as `NaN` regardless of the value passed in.
    pub fn new(
        stations: Vec<String>,
        start: NaiveDate,
        len: usize,
        mut flows: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::Data("dataset has no stations".into()));
        }
        if len == 0 || !len.is_multiple_of(POINTS_PER_DAY) {
            return Err(Error::Data(format!(
                "series length {len} is not a positive multiple of {POINTS_PER_DAY}"
            )));
        }
        let cells = stations.len() * len;
        if flows.len() != cells || mask.len() != cells {
            return Err(Error::Data(format!(
                "expected {cells} cells, got {} flows and {} mask entries",
                flows.len(),
                mask.len()
            )));
        }
        for (v, &m) in flows.iter_mut().zip(&mask) {
            if !m {
                *v = f64::NAN;
            } else if !v.is_finite() {
                return Err(Error::Data("observed cell is not finite".into()));
            }
        }
        Ok(Self {
            stations,
            lane: None,
            start,
            len,
            flows,
            mask,
        })
    }

    pub fn with_lane(mut self, lane: impl Into<String>) -> Self {
        self.lane = Some(lane.into());
        self
    }

    pub fn stations(&self) -> &[String] {
        &self.stations
    }

    pub fn lane(&self) -> Option<&str> {
        self.lane.as_deref()
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn num_stations(&self) -> usize {
        self.stations.len()
    }

    /// Number of timestamps.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_days(&self) -> usize {
        self.len / POINTS_PER_DAY
    }

    pub fn value(&self, station: usize, t: usize) -> f64 {
        self.flows[station * self.len + t]
    }

    pub fn observed(&self, station: usize, t: usize) -> bool {
        self.mask[station * self.len + t]
    }

    pub fn get(&self, station: usize, t: usize) -> Option<f64> {
        self.observed(station, t).then(|| self.value(station, t))
    }

    pub fn flows(&self) -> &[f64] {
        &self.flows
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set(&mut self, station: usize, t: usize, value: Option<f64>) {
        let i = station * self.len + t;
        match value {
            Some(v) => {
                self.flows[i] = v;
                self.mask[i] = true;
            }
            None => {
                self.flows[i] = f64::NAN;
                self.mask[i] = false;
            }
        }
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    pub fn date_of_day(&self, day: usize) -> NaiveDate {
        self.start + TimeDelta::days(day as i64)
    }

    /// Weekday of a timestamp, Monday = 0.
    pub fn weekday(&self, t: usize) -> usize {
        self.date_of_day(t / POINTS_PER_DAY)
            .weekday()
            .num_days_from_monday() as usize
    }

    /// Copy restricted to a range of whole days.
    pub fn days(&self, days: Range<usize>) -> Result<Self> {
        if days.is_empty() || days.end > self.num_days() {
            return Err(Error::Data(format!(
                "day range {days:?} outside 0..{}",
                self.num_days()
            )));
        }
        let (a, b) = (days.start * POINTS_PER_DAY, days.end * POINTS_PER_DAY);
        let mut flows = Vec::with_capacity(self.num_stations() * (b - a));
        let mut mask = Vec::with_capacity(flows.capacity());
        for s in 0..self.num_stations() {
            flows.extend_from_slice(&self.flows[s * self.len + a..s * self.len + b]);
            mask.extend_from_slice(&self.mask[s * self.len + a..s * self.len + b]);
        }
        Ok(Self {
            stations: self.stations.clone(),
            lane: self.lane.clone(),
            start: self.date_of_day(days.start),
            len: b - a,
            flows,
            mask,
        })
    }
}

/// Station order and lane label stored next to a flow CSV.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StationSidecar {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<String>,
    pub stations: Vec<String>,
}

/// `flows.csv` -> `flows.stations.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("stations.json")
}

/// Reads a flow CSV: first column an ISO-8601 timestamp at 5-minute
/// spacing starting at midnight, one column per station. Empty or `NaN`
/// fields are missing. A sidecar, when present, fixes the station order.
pub fn load_csv(path: &Path) -> Result<FlowDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.len() < 2 {
        return Err(Error::Data(
            "CSV needs a timestamp column and at least one station".into(),
        ));
    }
    let columns = header[1..].to_vec();

    let mut columns_data: Vec<Vec<Option<f64>>> = vec![Vec::new(); columns.len()];
    let mut start: Option<NaiveDateTime> = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let stamp = NaiveDateTime::parse_from_str(&record[0], TIMESTAMP_FORMAT).map_err(|e| {
            Error::Data(format!(
                "row {}: bad timestamp {:?}: {e}",
                row + 1,
                &record[0]
            ))
        })?;
        let first = *start.get_or_insert(stamp);
        if row == 0 && stamp.time() != chrono::NaiveTime::MIN {
            return Err(Error::Data(format!(
                "first timestamp {stamp} is not at midnight"
            )));
        }
        let expected = first + TimeDelta::minutes(5 * row as i64);
        if stamp != expected {
            return Err(Error::Data(format!(
                "row {}: timestamp {stamp} breaks the 5-minute grid (expected {expected})",
                row + 1
            )));
        }
        for (col, field) in columns_data.iter_mut().zip(record.iter().skip(1)) {
            let field = field.trim();
            let v = if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                None
            } else {
                Some(field.parse::<f64>().map_err(|e| {
                    Error::Data(format!("row {}: bad value {field:?}: {e}", row + 1))
                })?)
            };
            col.push(v);
        }
    }
    let start = start.ok_or_else(|| Error::Data("CSV has no rows".into()))?;
    let len = columns_data[0].len();

    let sidecar = sidecar_path(path);
    let (order, lane) = if sidecar.exists() {
        let meta: StationSidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        for c in &columns {
            if !meta.stations.contains(c) {
                return Err(Error::Data(format!("unknown station column {c:?}")));
            }
        }
        let order = meta
            .stations
            .iter()
            .map(|id| {
                columns
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| Error::Data(format!("station {id:?} missing from CSV")))
            })
            .collect::<Result<Vec<_>>>()?;
        (order, meta.lane)
    } else {
        ((0..columns.len()).collect(), None)
    };

    let stations = order.iter().map(|&i| columns[i].clone()).collect();
    let mut flows = Vec::with_capacity(order.len() * len);
    let mut mask = Vec::with_capacity(order.len() * len);
    for &i in &order {
        for v in &columns_data[i] {
            flows.push(v.unwrap_or(f64::NAN));
            mask.push(v.is_some());
        }
    }
    let ds = FlowDataset::new(stations, start.date(), len, flows, mask)?;
    Ok(match lane {
        Some(l) => ds.with_lane(l),
        None => ds,
    })
}

/// Writes the CSV and its station sidecar.
pub fn save_csv(ds: &FlowDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(ds.stations.iter().cloned());
    writer.write_record(&header)?;
    let origin = ds.start.and_time(chrono::NaiveTime::MIN);
    let mut row = Vec::with_capacity(header.len());
    for t in 0..ds.len {
        row.clear();
        let stamp = origin + TimeDelta::minutes(5 * t as i64);
        row.push(stamp.format(TIMESTAMP_FORMAT).to_string());
        for s in 0..ds.num_stations() {
            row.push(ds.get(s, t).map(|v| v.to_string()).unwrap_or_default());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    let meta = StationSidecar {
        version: 1,
        lane: ds.lane.clone(),
        stations: ds.stations.clone(),
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}

/// Marks negative observations as missing.
pub fn clean(ds: &FlowDataset) -> FlowDataset {
    let mut out = ds.clone();
    for (v, m) in out.flows.iter_mut().zip(out.mask.iter_mut()) {
        if *m && *v < 0.0 {
            *m = false;
            *v = f64::NAN;
        }
    }
    out
}

/// Per-station affine map to zero mean and unit (sample) variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over observed cells inside `days`.
    pub fn fit(ds: &FlowDataset, days: Range<usize>) -> Result<Self> {
        let (a, b) = (days.start * POINTS_PER_DAY, days.end * POINTS_PER_DAY);
        if days.is_empty() || b > ds.len {
            return Err(Error::Data(format!("bad statistics range {days:?}")));
        }
        let mut mean = Vec::with_capacity(ds.num_stations());
        let mut std = Vec::with_capacity(ds.num_stations());
        for s in 0..ds.num_stations() {
            let vals: Vec<f64> = (a..b).filter_map(|t| ds.get(s, t)).collect();
            if vals.len() < 2 {
                return Err(Error::Data(format!(
                    "station {} has {} observed training values",
                    ds.stations[s],
                    vals.len()
                )));
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
            if var <= 0.0 {
                return Err(Error::Data(format!(
                    "station {} has zero variance",
                    ds.stations[s]
                )));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &FlowDataset) -> Result<FlowDataset> {
        if self.mean.len() != ds.num_stations() {
            return Err(Error::Data(format!(
                "standardizer covers {} stations, dataset has {}",
                self.mean.len(),
                ds.num_stations()
            )));
        }
        let mut out = ds.clone();
        for s in 0..ds.num_stations() {
            let row = &mut out.flows[s * ds.len..(s + 1) * ds.len];
            for v in row {
                *v = (*v - self.mean[s]) / self.std[s];
            }
        }
        Ok(out)
    }
}

/// Fits statistics on `train_days` and applies them to the whole dataset.
pub fn standardize(
    ds: &FlowDataset,
    train_days: Range<usize>,
) -> Result<(FlowDataset, Standardizer)> {
    let stats = Standardizer::fit(ds, train_days)?;
    Ok((stats.apply(ds)?, stats))
}

/// Whole-percent split fractions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPercent {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitPercent {
    fn default() -> Self {
        Self {
            train: 80,
            val: 10,
            test: 10,
        }
    }
}

/// Chronological day ranges of the three partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DaySplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Splits `days` chronologically; validation and test get the floor of
/// their share, every remaining day goes to training.
pub fn split(days: usize, pct: SplitPercent) -> Result<DaySplit> {
    if pct.train + pct.val + pct.test != 100 {
        return Err(Error::Config(format!(
            "split percentages {pct:?} do not sum to 100"
        )));
    }
    if days < 10 {
        return Err(Error::Data(format!(
            "need at least 10 days to split, got {days}"
        )));
    }
    let val = days * pct.val as usize / 100;
    let test = days * pct.test as usize / 100;
    let train = days - val - test;
    Ok(DaySplit {
        train: 0..train,
        val: train..train + val,
        test: train + val..days,
    })
}

/// Window geometry: near-term length, horizon and daily/weekly half-widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub n: usize,
    pub h: usize,
    pub n_d: usize,
    pub n_w: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            n: 21,
            h: 9,
            n_d: 6,
            n_w: 6,
        }
    }
}

impl WindowConfig {
    /// True when the daily and weekly blocks are as wide as the near-term one.
    pub fn is_balanced(&self) -> bool {
        2 * self.n_d + self.h == self.n && 2 * self.n_w + self.h == self.n
    }

    pub fn daily_width(&self) -> usize {
        2 * self.n_d + self.h
    }

    pub fn weekly_width(&self) -> usize {
        2 * self.n_w + self.h
    }

    /// Inclusive range of within-day prediction positions keeping every
    /// block inside its own day.
    pub fn positions(&self) -> Result<std::ops::RangeInclusive<usize>> {
        if self.n == 0 || self.h == 0 {
            return Err(Error::Config("window needs n >= 1 and h >= 1".into()));
        }
        let lo = self.n.max(self.n_d).max(self.n_w);
        let reach = self.h + self.n_d.max(self.n_w);
        if reach > POINTS_PER_DAY || lo > POINTS_PER_DAY - reach {
            return Err(Error::Config(format!(
                "window {self:?} does not fit in a day"
            )));
        }
        Ok(lo..=POINTS_PER_DAY - reach)
    }

    pub fn windows_per_day(&self) -> Result<usize> {
        let r = self.positions()?;
        Ok(r.end() - r.start() + 1)
    }
}

/// A `[p, width]` block of values with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl Block {
    /// Copies columns `from..from + width` of every station.
    pub fn read(ds: &FlowDataset, from: usize, width: usize) -> Self {
        let p = ds.num_stations();
        let mut data = Vec::with_capacity(p * width);
        let mut mask = Vec::with_capacity(p * width);
        for s in 0..p {
            let base = s * ds.len + from;
            data.extend_from_slice(&ds.flows[base..base + width]);
            mask.extend_from_slice(&ds.mask[base..base + width]);
        }
        Self {
            values: Tensor::matrix(p, width, data).expect("non-empty block"),
            mask,
        }
    }
}

/// One training example: near-term, daily and weekly inputs plus target.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Absolute timestamp of the first predicted step.
    pub t: usize,
    /// Columns `t - n .. t`.
    pub near: Block,
    /// Columns `t_d - n_d .. t_d + n_d + h` with `t_d = t - 288`.
    pub daily: Block,
    /// Same span one week back.
    pub weekly: Block,
    /// Columns `t .. t + h`.
    pub target: Block,
}

impl WindowSample {
    pub fn read(ds: &FlowDataset, cfg: &WindowConfig, t: usize) -> Self {
        let t_d = t - POINTS_PER_DAY;
        let t_w = t - WEEK_DAYS * POINTS_PER_DAY;
        Self {
            t,
            near: Block::read(ds, t - cfg.n, cfg.n),
            daily: Block::read(ds, t_d - cfg.n_d, cfg.daily_width()),
            weekly: Block::read(ds, t_w - cfg.n_w, cfg.weekly_width()),
            target: Block::read(ds, t, cfg.h),
        }
    }
}

/// Prediction timestamps of one day, in order.
pub fn day_positions(cfg: &WindowConfig, day: usize) -> Result<Vec<usize>> {
    let base = day * POINTS_PER_DAY;
    Ok(cfg.positions()?.map(|pos| base + pos).collect())
}

/// All windows whose prediction time falls in `days`. Days before index 7
/// have no week-back history and are rejected.
pub fn extract_windows(
    ds: &FlowDataset,
    cfg: &WindowConfig,
    days: Range<usize>,
) -> Result<Vec<WindowSample>> {
    if days.start < WEEK_DAYS {
        return Err(Error::Data(format!(
            "day range {days:?} reaches before day {WEEK_DAYS}; weekly lag unavailable"
        )));
    }
    if days.end > ds.num_days() {
        return Err(Error::Data(format!(
            "day range {days:?} outside 0..{}",
            ds.num_days()
        )));
    }
    let mut out = Vec::with_capacity(days.len() * cfg.windows_per_day()?);
    for day in days {
        for t in day_positions(cfg, day)? {
            out.push(WindowSample::read(ds, cfg, t));
        }
    }
    Ok(out)
}
