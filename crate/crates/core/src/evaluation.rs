//! Error metrics, bucketed evaluation reports, baselines and missing-ratio
//! robustness sweeps.

use std::fmt::Write as _;

use chrono::{Datelike, NaiveDate, TimeDelta};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{FlowDataset, Standardizer, POINTS_PER_DAY};
use crate::error::{Error, Result};
use crate::hybrid::{Architecture, Batch, Model};
use crate::imputation::{self, inject_missing, Method, Scope};
use crate::pipeline::{self, PipelineConfig};
use crate::training::{self, MeanSd, TrainConfig};

fn check_series(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(Error::shape("metric", &[pred.len()], &[actual.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Data("metric over an empty series".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_series(pred, actual)?;
    let sum: f64 = pred.iter().zip(actual).map(|(p, a)| (a - p).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Root mean square error.
pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_series(pred, actual)?;
    let sum: f64 = pred.iter().zip(actual).map(|(p, a)| (a - p).powi(2)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Running sums of absolute and squared residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accumulator {
    pub count: usize,
    pub abs_sum: f64,
    pub sq_sum: f64,
}

impl Accumulator {
    pub fn push(&mut self, residual: f64) {
        self.count += 1;
        self.abs_sum += residual.abs();
        self.sq_sum += residual * residual;
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.abs_sum / self.count as f64)
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sq_sum / self.count as f64).sqrt())
    }

    pub fn metric(&self) -> Option<Metric> {
        Some(Metric {
            mae: self.mae()?,
            rmse: self.rmse()?,
            count: self.count,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// One bucket of a view. `mae`/`rmse` are `None` when the bucket is empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketStats {
    pub bucket: String,
    pub count: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
}

impl BucketStats {
    fn new(bucket: String, acc: &Accumulator) -> Self {
        Self {
            bucket,
            count: acc.count,
            mae: acc.mae(),
            rmse: acc.rmse(),
        }
    }

    pub fn is_defined(&self) -> bool {
        self.count > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Horizon,
    TimeOfDay,
    DayOfWeek,
    Station,
}

impl View {
    pub const ALL: [View; 4] = [
        View::Horizon,
        View::TimeOfDay,
        View::DayOfWeek,
        View::Station,
    ];

    pub fn name(self) -> &'static str {
        match self {
            View::Horizon => "horizon",
            View::TimeOfDay => "tod",
            View::DayOfWeek => "dow",
            View::Station => "station",
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizon" => Ok(View::Horizon),
            "tod" | "time_of_day" | "timestamp" => Ok(View::TimeOfDay),
            "dow" | "day_of_week" | "day" => Ok(View::DayOfWeek),
            "station" => Ok(View::Station),
            _ => Err(Error::Config(format!(
                "unknown view {s:?}; expected horizon, tod, dow or station"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub arch: Option<String>,
    pub imputation: Option<String>,
    pub missing_ratio: f64,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub overall: BucketStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<Vec<BucketStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_of_day: Option<Vec<BucketStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub day_of_week: Option<Vec<BucketStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub station: Option<Vec<BucketStats>>,
}

const WEEKDAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

impl EvalReport {
    pub fn view(&self, view: View) -> Option<&[BucketStats]> {
        match view {
            View::Horizon => self.horizon.as_deref(),
            View::TimeOfDay => self.time_of_day.as_deref(),
            View::DayOfWeek => self.day_of_week.as_deref(),
            View::Station => self.station.as_deref(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Flat CSV, one row per bucket; empty buckets print `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,bucket,count,mae,rmse\n");
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        let mut row = |view: &str, b: &BucketStats| {
            let _ = writeln!(
                out,
                "{view},{},{},{},{}",
                b.bucket,
                b.count,
                fmt(b.mae),
                fmt(b.rmse)
            );
        };
        row("overall", &self.overall);
        for view in View::ALL {
            for b in self.view(view).unwrap_or_default() {
                row(view.name(), b);
            }
        }
        out
    }
}

/// Anything that maps a batch to `[p * h, batch]` predictions.
pub trait Predictor: Sync {
    fn predict(&self, batch: &Batch) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&self, batch: &Batch) -> Result<Tensor> {
        Model::predict(self, batch)
    }
}

/// Repeats the last observed near-term value over the whole horizon.
#[derive(Clone, Copy, Debug)]
pub struct Persistence {
    pub h: usize,
}

impl Predictor for Persistence {
    fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let last = batch.streams[0]
            .last()
            .ok_or_else(|| Error::Data("empty near-term stream".into()))?;
        let (p, size) = (last.rows(), last.cols());
        let mut out = vec![0.0; p * self.h * size];
        for s in 0..p {
            for k in 0..self.h {
                out[(s * self.h + k) * size..(s * self.h + k + 1) * size]
                    .copy_from_slice(&last.data()[s * size..(s + 1) * size]);
            }
        }
        Tensor::matrix(p * self.h, size, out)
    }
}

/// Training-range mean per (station, timestamp-of-day).
#[derive(Clone, Debug)]
pub struct HistoricalMean {
    pub h: usize,
    table: Vec<f64>,
}

impl HistoricalMean {
    /// `ds` should be in the same units as the targets (standardised).
    pub fn fit(ds: &FlowDataset, train_days: std::ops::Range<usize>, h: usize) -> Result<Self> {
        let model = imputation::fit(Method::Mean, ds, train_days)?;
        let table = (0..ds.num_stations())
            .flat_map(|s| (0..POINTS_PER_DAY).map(move |tau| (s, tau)))
            .map(|(s, tau)| model.table_value(s, tau))
            .collect();
        Ok(Self { h, table })
    }
}

impl Predictor for HistoricalMean {
    fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let (p, size) = (batch.stations(), batch.len());
        if self.table.len() != p * POINTS_PER_DAY {
            return Err(Error::shape(
                "historical mean",
                &[self.table.len()],
                &[p * POINTS_PER_DAY],
            ));
        }
        let mut out = vec![0.0; p * self.h * size];
        for s in 0..p {
            for k in 0..self.h {
                for (b, &t) in batch.times.iter().enumerate() {
                    let tau = (t + k) % POINTS_PER_DAY;
                    out[(s * self.h + k) * size + b] = self.table[s * POINTS_PER_DAY + tau];
                }
            }
        }
        Tensor::matrix(p * self.h, size, out)
    }
}

/// Scores `predictor` on observed target cells and buckets the residuals.
/// `start` is the calendar date of timestamp 0.
pub fn evaluate(
    predictor: &dyn Predictor,
    batches: &[Batch],
    start: NaiveDate,
    views: &[View],
    meta: EvalMeta,
) -> Result<EvalReport> {
    let first = batches
        .first()
        .ok_or_else(|| Error::Data("nothing to evaluate".into()))?;
    let p = first.stations();
    let h = first.target.rows() / p;
    let mut overall = Accumulator::default();
    let mut horizon = vec![Accumulator::default(); h];
    let mut tod = vec![Accumulator::default(); POINTS_PER_DAY];
    let mut dow = [Accumulator::default(); 7];
    let mut station = vec![Accumulator::default(); p];

    let preds: Vec<Tensor> = batches
        .par_iter()
        .map(|b| predictor.predict(b))
        .collect::<Result<_>>()?;
    for (batch, pred) in batches.iter().zip(&preds) {
        if pred.shape() != batch.target.shape() {
            return Err(Error::shape(
                "prediction",
                pred.shape(),
                batch.target.shape(),
            ));
        }
        let size = batch.len();
        for (s, station_acc) in station.iter_mut().enumerate() {
            for (k, horizon_acc) in horizon.iter_mut().enumerate() {
                let row = s * h + k;
                for (b, &t) in batch.times.iter().enumerate() {
                    let i = row * size + b;
                    if batch.target_mask.data()[i] == 0.0 {
                        continue;
                    }
                    let r = batch.target.data()[i] - pred.data()[i];
                    let when = t + k;
                    let day = when / POINTS_PER_DAY;
                    let weekday = (start + TimeDelta::days(day as i64))
                        .weekday()
                        .num_days_from_monday() as usize;
                    overall.push(r);
                    horizon_acc.push(r);
                    tod[when % POINTS_PER_DAY].push(r);
                    dow[weekday].push(r);
                    station_acc.push(r);
                }
            }
        }
    }
    let want = |v: View| views.contains(&v);
    let label_tod = |tau: usize| format!("{:02}:{:02}", tau * 5 / 60, tau * 5 % 60);
    Ok(EvalReport {
        meta,
        overall: BucketStats::new("all".into(), &overall),
        horizon: want(View::Horizon).then(|| {
            horizon
                .iter()
                .enumerate()
                .map(|(k, a)| BucketStats::new((k + 1).to_string(), a))
                .collect()
        }),
        time_of_day: want(View::TimeOfDay).then(|| {
            tod.iter()
                .enumerate()
                .map(|(tau, a)| BucketStats::new(label_tod(tau), a))
                .collect()
        }),
        day_of_week: want(View::DayOfWeek).then(|| {
            dow.iter()
                .zip(WEEKDAYS)
                .map(|(a, d)| BucketStats::new(d.into(), a))
                .collect()
        }),
        station: want(View::Station).then(|| {
            station
                .iter()
                .enumerate()
                .map(|(s, a)| BucketStats::new(s.to_string(), a))
                .collect()
        }),
    })
}

/// Overall metric of `predictor` on `batches`.
pub fn score(predictor: &dyn Predictor, batches: &[Batch]) -> Result<Metric> {
    let report = evaluate(predictor, batches, NaiveDate::MIN, &[], EvalMeta::default())?;
    Ok(Metric {
        mae: report
            .overall
            .mae
            .ok_or_else(|| Error::Data("no observed targets to score".into()))?,
        rmse: report.overall.rmse.unwrap_or_default(),
        count: report.overall.count,
    })
}

/// Default missing-ratio grid: 0 to 0.30 in steps of 0.03.
pub fn default_ratio_grid() -> Vec<f64> {
    (0..=10).map(|i| (i * 3) as f64 / 100.0).collect()
}

/// How models are obtained for each point of a sweep.
pub enum SweepProtocol<'a> {
    /// One model trained on complete data; missing values are injected
    /// into the test days only.
    CompleteTrain {
        model: &'a Model,
        standardizer: &'a Standardizer,
    },
    /// Missing values are injected everywhere and a model is trained for
    /// every (ratio, seed).
    Retrain {
        arch: Architecture,
        share_weights: bool,
        train: &'a TrainConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub method: Method,
    pub mae: MeanSd,
    pub rmse: MeanSd,
    /// Target cells scored per seed.
    pub eval_cells: usize,
}

/// Error versus injected missing ratio, averaged over `seeds`.
///
/// Injected cells are filled with `method`; native gaps keep the
/// `cfg.method` fill the model was trained with, so the ratio-0 point does
/// not depend on `method`. Targets are always scored against the cells
/// observed in `pristine`.
pub fn robustness_sweep(
    protocol: &SweepProtocol<'_>,
    pristine: &FlowDataset,
    cfg: &PipelineConfig,
    method: Method,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if ratios.is_empty() || !ratios.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("ratios must be strictly ascending".into()));
    }
    if !ratios.contains(&0.0) {
        return Err(Error::Config("ratio grid must include 0".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one injection seed".into(),
        ));
    }
    let split = crate::dataset::split(pristine.num_days(), cfg.split)?;
    let fitted = match protocol {
        SweepProtocol::CompleteTrain { .. } => Some((
            imputation::fit(cfg.method, pristine, split.train.clone())?,
            imputation::fit(method, pristine, split.train.clone())?,
        )),
        SweepProtocol::Retrain { .. } => None,
    };
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let metrics: Vec<Metric> = seeds
            .par_iter()
            .map(|&seed| -> Result<Metric> {
                match protocol {
                    SweepProtocol::CompleteTrain {
                        model,
                        standardizer,
                    } => {
                        let scope = Scope::Days(split.test.clone());
                        let (available, _) = inject_missing(pristine, ratio, seed, &scope)?;
                        let (base, injected) = fitted.as_ref().expect("fitted above");
                        let test = pipeline::test_batches(
                            pristine,
                            &available,
                            base,
                            injected,
                            standardizer,
                            cfg,
                        )?;
                        score(*model, &test)
                    }
                    SweepProtocol::Retrain {
                        arch,
                        share_weights,
                        train,
                    } => {
                        let (available, _) =
                            inject_missing(pristine, ratio, seed, &Scope::AllData)?;
                        let data = pipeline::prepare_with(pristine, &available, cfg, method, None)?;
                        let run_seed = train.seeds.first().copied().unwrap_or(0);
                        let run =
                            training::run_single(*arch, *share_weights, &data, train, run_seed)?;
                        Ok(run.test)
                    }
                }
            })
            .collect::<Result<_>>()?;
        let maes: Vec<f64> = metrics.iter().map(|m| m.mae).collect();
        let rmses: Vec<f64> = metrics.iter().map(|m| m.rmse).collect();
        points.push(SweepPoint {
            ratio,
            method,
            mae: MeanSd::of(&maes),
            rmse: MeanSd::of(&rmses),
            eval_cells: metrics[0].count,
        });
    }
    Ok(points)
}

/// Sweep rows as CSV.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("ratio,method,mae_mean,mae_sd,rmse_mean,rmse_sd\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.ratio,
            p.method.name(),
            p.mae.mean,
            p.mae.sd,
            p.rmse.mean,
            p.rmse.sd
        );
    }
    out
}
