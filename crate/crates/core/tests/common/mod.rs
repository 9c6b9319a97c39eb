//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use chrono::NaiveDate;
use flowcast::autodiff::Tensor;
use flowcast::dataset::{FlowDataset, WindowConfig, POINTS_PER_DAY};
use flowcast::hybrid::{Batch, Model};
use flowcast::layers::LstmParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar-loop LSTM over the columns of `seq` (`[input, n]`), zero initial
/// state, gates in f, i, c, o order. Returns `[hidden][n]` hidden outputs.
pub fn lstm_reference(params: &LstmParams, seq: &Tensor) -> Vec<Vec<f64>> {
    let hidden = params.b[0].numel();
    let input = seq.rows();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = vec![Vec::new(); hidden];
    for t in 0..seq.cols() {
        let mut pre = [
            vec![0.0; hidden],
            vec![0.0; hidden],
            vec![0.0; hidden],
            vec![0.0; hidden],
        ];
        for (gate, acc) in pre.iter_mut().enumerate() {
            for r in 0..hidden {
                let mut z = params.b[gate].data()[r];
                for k in 0..input {
                    z += params.w[gate].at(r, k) * seq.at(k, t);
                }
                for k in 0..hidden {
                    z += params.u[gate].at(r, k) * h[k];
                }
                acc[r] = z;
            }
        }
        for r in 0..hidden {
            let f = sigmoid(pre[0][r]);
            let i = sigmoid(pre[1][r]);
            let z = pre[2][r].tanh();
            let o = sigmoid(pre[3][r]);
            c[r] = f * c[r] + i * z;
            h[r] = o * c[r].tanh();
            out[r].push(h[r]);
        }
    }
    out
}

/// Dataset with uniform random flows in [0, 100) and the given fraction
/// of cells missing.
pub fn random_dataset(p: usize, days: usize, missing: f64, rng: &mut impl Rng) -> FlowDataset {
    let len = days * POINTS_PER_DAY;
    let flows = (0..p * len).map(|_| rng.random_range(0.0..100.0)).collect();
    let mask = (0..p * len).map(|_| !rng.random_bool(missing)).collect();
    FlowDataset::new(
        (0..p).map(|s| format!("st{s}")).collect(),
        NaiveDate::from_ymd_opt(2020, 2, 3).unwrap(),
        len,
        flows,
        mask,
    )
    .unwrap()
}

/// Values of station `s` over `from..from + width`, NaN where missing.
pub fn slice_row(ds: &FlowDataset, s: usize, from: usize, width: usize) -> Vec<f64> {
    (from..from + width)
        .map(|t| ds.get(s, t).unwrap_or(f64::NAN))
        .collect()
}

/// Hand-sliced window at prediction time `t`: near, daily, weekly, target
/// blocks as `[station][column]`.
pub fn slice_window(ds: &FlowDataset, cfg: &WindowConfig, t: usize) -> [Vec<Vec<f64>>; 4] {
    let day = POINTS_PER_DAY;
    let week = 7 * POINTS_PER_DAY;
    let rows = |from: usize, width: usize| -> Vec<Vec<f64>> {
        (0..ds.num_stations())
            .map(|s| slice_row(ds, s, from, width))
            .collect()
    };
    [
        rows(t - cfg.n, cfg.n),
        rows(t - day - cfg.n_d, 2 * cfg.n_d + cfg.h),
        rows(t - week - cfg.n_w, 2 * cfg.n_w + cfg.h),
        rows(t, cfg.h),
    ]
}

pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| (0..t.cols()).map(|c| t.at(r, c)).collect())
        .collect()
}

/// NaN-aware bitwise equality of row blocks.
pub fn same_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len()
                && x.iter()
                    .zip(y)
                    .all(|(u, v)| u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()))
        })
}

/// Brute-force fill value for the gap at `(s, t)`: mean, median or
/// cross-date linear interpolation over observed training days at the
/// same timestamp-of-day, falling back to the station-wide statistic.
pub fn brute_fill(ds: &FlowDataset, train_days: usize, method: &str, s: usize, t: usize) -> f64 {
    let tau = t % POINTS_PER_DAY;
    let day = (t / POINTS_PER_DAY) as f64;
    let same_tau: Vec<(f64, f64)> = (0..train_days)
        .filter_map(|d| ds.get(s, d * POINTS_PER_DAY + tau).map(|v| (d as f64, v)))
        .collect();
    let station: Vec<f64> = (0..train_days * POINTS_PER_DAY)
        .filter_map(|u| ds.get(s, u))
        .collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let med = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let values: Vec<f64> = same_tau.iter().map(|&(_, v)| v).collect();
    match method {
        "mean" if values.is_empty() => avg(&station),
        "mean" => avg(&values),
        "median" if values.is_empty() => med(&station),
        "median" => med(&values),
        "interp" => {
            if values.is_empty() {
                return avg(&station);
            }
            let before = same_tau.iter().rev().find(|&&(d, _)| d <= day);
            let after = same_tau.iter().find(|&&(d, _)| d >= day);
            match (before, after) {
                (Some(&(d0, v0)), Some(&(d1, v1))) if d1 > d0 => {
                    v0 + (day - d0) / (d1 - d0) * (v1 - v0)
                }
                (Some(&(_, v)), _) | (None, Some(&(_, v))) => v,
                (None, None) => unreachable!(),
            }
        }
        _ => panic!("unknown method {method}"),
    }
}

/// Random batch of `size` columns shaped for `model`.
pub fn random_batch(model: &Model, size: usize, rng: &mut impl Rng) -> Batch {
    let spec = model.spec();
    let stream = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
        (0..spec.n)
            .map(|_| random_tensor(&[spec.p, size], rng))
            .collect()
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    Batch {
        streams: [stream(&mut local), stream(&mut local), stream(&mut local)],
        target: random_tensor(&[spec.p * spec.h, size], &mut local),
        target_mask: Tensor::full(&[spec.p * spec.h, size], 1.0),
        times: vec![0; size],
    }
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare by absolute difference. A two-point
/// difference at step 1e-5 carries up to ~5e-11 of rounding error, which
/// the 1e-5 floor keeps below a 1e-5 tolerance.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central-difference gradient of `loss` with respect to every entry of
/// `params[which]`.
pub fn numeric_gradient(
    params: &mut [Tensor],
    which: usize,
    step: f64,
    loss: &mut dyn FnMut(&[Tensor]) -> f64,
) -> Vec<f64> {
    (0..params[which].numel())
        .map(|i| {
            let orig = params[which].data()[i];
            params[which].data_mut()[i] = orig + step;
            let up = loss(params);
            params[which].data_mut()[i] = orig - step;
            let down = loss(params);
            params[which].data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Fourth-order central difference, `(-f(x+2s) + 8f(x+s) - 8f(x-s) +
/// f(x-2s)) / 12s`, of `loss` with respect to entry `i` of `params[which]`.
pub fn numeric_partial4(
    params: &mut [Tensor],
    which: usize,
    i: usize,
    step: f64,
    loss: &mut dyn FnMut(&[Tensor]) -> f64,
) -> f64 {
    let orig = params[which].data()[i];
    let mut at = |offset: f64| {
        params[which].data_mut()[i] = orig + offset;
        loss(params)
    };
    let d = -at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step);
    params[which].data_mut()[i] = orig;
    d / (12.0 * step)
}
