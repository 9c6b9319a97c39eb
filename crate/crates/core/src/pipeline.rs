//! Preprocessing chain shared by training, evaluation and sweeps:
//! impute in raw units, standardise with training statistics, cut windows
//! into one batch per day.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, DaySplit, FlowDataset, SplitPercent, Standardizer, WindowConfig, POINTS_PER_DAY,
    WEEK_DAYS,
};
use crate::error::{Error, Result};
use crate::hybrid::Batch;
use crate::imputation::{self, ImputationModel, Method};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window: WindowConfig,
    pub split: SplitPercent,
    pub method: Method,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            split: SplitPercent::default(),
            method: Method::Mean,
        }
    }
}

/// Day-batched model inputs for all three partitions.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: DaySplit,
    pub standardizer: Standardizer,
    pub imputer: ImputationModel,
    pub train: Vec<Batch>,
    pub val: Vec<Batch>,
    pub test: Vec<Batch>,
    pub start: chrono::NaiveDate,
    pub stations: usize,
}

/// Days of `range` that have a full week of history.
pub fn eligible(range: &Range<usize>) -> Range<usize> {
    range.start.max(WEEK_DAYS)..range.end
}

/// One batch per day in `days`: inputs from `inputs`, targets and their
/// mask from `targets`. Both datasets must already be standardised.
pub fn day_batches(
    inputs: &FlowDataset,
    targets: &FlowDataset,
    window: &WindowConfig,
    days: Range<usize>,
) -> Result<Vec<Batch>> {
    let days = eligible(&days);
    days.into_par_iter()
        .map(|day| {
            let mut samples = dataset::extract_windows(inputs, window, day..day + 1)?;
            for w in &mut samples {
                w.target = dataset::Block::read(targets, w.t, window.h);
            }
            Batch::from_samples(&samples)
        })
        .collect()
}

/// Fills every gap of `available`. Cells missing in `pristine` as well
/// (native gaps) use `base`; cells removed by injection use `injected`.
pub fn fill_gaps(
    pristine: &FlowDataset,
    available: &FlowDataset,
    base: &ImputationModel,
    injected: &ImputationModel,
) -> FlowDataset {
    let mut out = available.clone();
    for s in 0..available.num_stations() {
        for t in 0..available.len() {
            if available.observed(s, t) {
                continue;
            }
            let rule = if pristine.observed(s, t) {
                injected
            } else {
                base
            };
            let (day, tau) = (t / POINTS_PER_DAY, t % POINTS_PER_DAY);
            out.set(
                s,
                t,
                Some(rule.fill_value(s, tau, available.date_of_day(day))),
            );
        }
    }
    out
}

/// Builds every partition.
///
/// `pristine` is the cleaned dataset used as ground truth for validation
/// and test targets; `available` is what the pipeline may see (equal to
/// `pristine` unless cells were injected as missing). Imputation and
/// standardisation statistics come from the training days of `available`
/// unless `stats` overrides the latter. Native gaps are filled with
/// `cfg.method`, injected ones with `injected`.
pub fn prepare_with(
    pristine: &FlowDataset,
    available: &FlowDataset,
    cfg: &PipelineConfig,
    injected: Method,
    stats: Option<&Standardizer>,
) -> Result<Prepared> {
    if pristine.num_stations() != available.num_stations() || pristine.len() != available.len() {
        return Err(Error::Data(
            "pristine and available datasets differ in shape".into(),
        ));
    }
    let split = dataset::split(pristine.num_days(), cfg.split)?;
    if split.val.start < WEEK_DAYS || eligible(&split.train).is_empty() {
        return Err(Error::Data(format!(
            "{} days leave no training windows with a week of history",
            pristine.num_days()
        )));
    }
    let imputer = imputation::fit(cfg.method, available, split.train.clone())?;
    let injected = if injected == cfg.method {
        imputer.clone()
    } else {
        imputation::fit(injected, available, split.train.clone())?
    };
    let standardizer = match stats {
        Some(s) => s.clone(),
        None => Standardizer::fit(available, split.train.clone())?,
    };
    let inputs = standardizer.apply(&fill_gaps(pristine, available, &imputer, &injected))?;
    let train_targets = standardizer.apply(available)?;
    let eval_targets = standardizer.apply(pristine)?;
    Ok(Prepared {
        train: day_batches(&inputs, &train_targets, &cfg.window, split.train.clone())?,
        val: day_batches(&inputs, &eval_targets, &cfg.window, split.val.clone())?,
        test: day_batches(&inputs, &eval_targets, &cfg.window, split.test.clone())?,
        split,
        standardizer,
        imputer,
        start: pristine.start(),
        stations: pristine.num_stations(),
    })
}

/// [`prepare_with`] using `cfg.method` for every gap.
pub fn prepare(
    pristine: &FlowDataset,
    available: &FlowDataset,
    cfg: &PipelineConfig,
    stats: Option<&Standardizer>,
) -> Result<Prepared> {
    prepare_with(pristine, available, cfg, cfg.method, stats)
}

/// Test batches only, for sweeps that reuse a trained model.
pub fn test_batches(
    pristine: &FlowDataset,
    available: &FlowDataset,
    base: &ImputationModel,
    injected: &ImputationModel,
    standardizer: &Standardizer,
    cfg: &PipelineConfig,
) -> Result<Vec<Batch>> {
    let split = dataset::split(pristine.num_days(), cfg.split)?;
    let inputs = standardizer.apply(&fill_gaps(pristine, available, base, injected))?;
    let targets = standardizer.apply(pristine)?;
    day_batches(&inputs, &targets, &cfg.window, split.test)
}
