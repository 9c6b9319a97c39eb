//! Synthetic loop-detector flows with daily and weekly structure.
//!
//! Station `s` at time `t` follows the base profile at `t - s * lag`, scaled
//! by a weekend factor and a per-day demand factor, with multiplicative
//! Gaussian noise. Values are clamped at zero and a fraction of cells is
//! removed uniformly.

use chrono::{Datelike, NaiveDate, TimeDelta, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FlowDataset, POINTS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub p: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    /// 288-point daily curve; `None` uses [`default_profile`].
    pub profile: Option<Vec<f64>>,
    pub weekend_scale: f64,
    /// Timestamps per station hop, upstream to downstream.
    pub propagation_lag: usize,
    /// Noise standard deviation as a fraction of the signal.
    pub noise_std: f64,
    /// Standard deviation of the per-day demand multiplier around 1.
    pub day_scale_std: f64,
    pub native_missing_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            p: 8,
            days: 60,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
            profile: None,
            weekend_scale: 0.6,
            propagation_lag: 2,
            noise_std: 0.05,
            day_scale_std: 0.08,
            native_missing_ratio: 0.07,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Config("synthetic data needs p >= 1".into()));
        }
        if self.days == 0 {
            return Err(Error::Config("synthetic data needs days >= 1".into()));
        }
        if self.weekend_scale.is_nan()
            || self.weekend_scale <= 0.0
            || self.noise_std < 0.0
            || self.day_scale_std < 0.0
        {
            return Err(Error::Config("synthetic scales must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.native_missing_ratio) {
            return Err(Error::Config(
                "native missing ratio must be in [0, 1)".into(),
            ));
        }
        if let Some(p) = &self.profile {
            if p.len() != POINTS_PER_DAY || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!(
                    "profile must have {POINTS_PER_DAY} non-negative values"
                )));
            }
        }
        Ok(())
    }
}

/// Double-peaked weekday curve in vehicles per 5 minutes: a night floor,
/// a morning rush near 07:45 and a wider evening rush near 17:15.
pub fn default_profile() -> Vec<f64> {
    (0..POINTS_PER_DAY)
        .map(|tau| {
            let hour = tau as f64 * 5.0 / 60.0;
            let bump = |centre: f64, width: f64| (-0.5 * ((hour - centre) / width).powi(2)).exp();
            let daytime = 1.0 / (1.0 + (-(hour - 6.0) * 1.5).exp())
                - 1.0 / (1.0 + (-(hour - 22.0) * 1.2).exp());
            40.0 + 160.0 * daytime + 220.0 * bump(7.75, 1.2) + 200.0 * bump(17.25, 1.6)
        })
        .collect()
}

fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

pub fn generate(cfg: &SynthConfig) -> Result<FlowDataset> {
    cfg.validate()?;
    let profile = cfg.profile.clone().unwrap_or_else(default_profile);
    let len = cfg.days * POINTS_PER_DAY;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // demand factors for every day the lagged profile can reach, including
    // the days before the start
    let max_shift = (cfg.p - 1) * cfg.propagation_lag;
    let lead_days = max_shift.div_ceil(POINTS_PER_DAY);
    let day_factor: Vec<f64> = (0..cfg.days + lead_days)
        .map(|_| (1.0 + cfg.day_scale_std * unit.sample(&mut rng)).max(0.0))
        .collect();

    let mut flows = Vec::with_capacity(cfg.p * len);
    for s in 0..cfg.p {
        let shift = s * cfg.propagation_lag;
        for t in 0..len {
            // position on the (possibly pre-start) timeline
            let pos = (t + lead_days * POINTS_PER_DAY) - shift;
            let day = pos / POINTS_PER_DAY;
            let date = cfg.start_date + TimeDelta::days(day as i64 - lead_days as i64);
            let weekday_scale = if is_weekend(date) {
                cfg.weekend_scale
            } else {
                1.0
            };
            let signal = profile[pos % POINTS_PER_DAY] * weekday_scale * day_factor[day];
            let noisy = signal * (1.0 + cfg.noise_std * unit.sample(&mut rng));
            flows.push(noisy.max(0.0));
        }
    }

    let mut miss_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mask: Vec<bool> = (0..cfg.p * len)
        .map(|_| !miss_rng.random_bool(cfg.native_missing_ratio))
        .collect();
    let stations = (0..cfg.p)
        .map(|s| format!("{}", 400_100 + s * 10))
        .collect();
    Ok(FlowDataset::new(stations, cfg.start_date, len, flows, mask)?.with_lane("ML"))
}
