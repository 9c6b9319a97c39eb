//! Adam with coupled L2, one step per day-batch, best-validation epoch
//! selection and multi-seed experiments.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::{self, Metric};
use crate::hybrid::{Architecture, Batch, Model, ModelSpec};
use crate::pipeline::Prepared;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub runs: usize,
    /// One seed per run; only the first `runs` are used.
    pub seeds: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2: 1e-4,
            max_epochs: 30,
            runs: 5,
            seeds: vec![1, 2, 3, 4, 5],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        if self.l2.is_nan() || self.l2 < 0.0 || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("l2 must be >= 0 and eps > 0".into()));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.runs == 0 || self.seeds.len() < self.runs {
            return Err(Error::Config(format!(
                "{} runs need as many seeds, {} given",
                self.runs,
                self.seeds.len()
            )));
        }
        Ok(())
    }
}

/// Mean of squared differences over every entry.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Mean of squared differences over entries where `mask` is 1.
pub fn masked_mse_loss(g: &mut Graph, pred: Var, target: Var, mask: Var) -> Result<Var> {
    let count = g.value(mask).data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::Data("batch has no observed targets".into()));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let kept = g.mul(sq, mask)?;
    let total = g.sum(kept);
    Ok(g.scale(total, 1.0 / count as f64))
}

/// One Adam update of a flat parameter block. `t` is the 1-based step.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape(
            "adam_step",
            &[n],
            &[grad.len(), m.len(), v.len()],
        ));
    }
    if t == 0 {
        return Err(Error::Config("Adam step index starts at 1".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {} at entry {i} of {n}",
            grad[i]
        )));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..n {
        let g = grad[i] + cfg.l2 * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        param[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Moment buffers for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adam_step(
                p.data_mut(),
                g.data(),
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                cfg,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("parameter {i}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub arch: String,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Optimizer steps taken over all epochs.
    pub steps: u64,
    pub wall_time_secs: f64,
    pub checkpoint_id: Option<String>,
}

impl TrainLog {
    /// JSON-lines: one object per epoch, then a summary object.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            let mut row = serde_json::to_value(e)?;
            row["arch"] = self.arch.clone().into();
            row["seed"] = self.seed.into();
            out += &serde_json::to_string(&row)?;
            out.push('\n');
        }
        let summary = serde_json::json!({
            "arch": self.arch,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "steps": self.steps,
            "wall_time_secs": self.wall_time_secs,
            "checkpoint_id": self.checkpoint_id,
        });
        out += &serde_json::to_string(&summary)?;
        out.push('\n');
        Ok(out)
    }
}

/// Loss and parameter gradients on one batch.
pub fn batch_gradients(model: &Model, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, true);
    let pred = model.forward_graph(&mut g, &vars, batch)?;
    let target = g.constant(batch.target.clone());
    let mask = g.constant(batch.target_mask.clone());
    let loss = masked_mse_loss(&mut g, pred, target, mask)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss diverged ({value})")));
    }
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// Trains `model` over chronological day-batches and returns the
/// parameters of the epoch with the lowest validation MAE.
pub fn train(
    mut model: Model,
    train_batches: &[Batch],
    val_batches: &[Batch],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train_batches.is_empty() {
        return Err(Error::Data("empty training stream".into()));
    }
    if val_batches.is_empty() {
        return Err(Error::Data("empty validation stream".into()));
    }
    let clock = Instant::now();
    let mut adam = Adam::new(model.params());
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for batch in train_batches {
            let (loss, grads) = batch_gradients(&model, batch)?;
            loss_sum += loss;
            adam.step(model.params_mut(), &grads, cfg)?;
        }
        let val = evaluation::score(&model, val_batches)?;
        if !val.mae.is_finite() {
            return Err(Error::Numeric(format!(
                "validation MAE is {} at epoch {epoch}",
                val.mae
            )));
        }
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_batches.len() as f64,
            val_mae: val.mae,
            val_rmse: val.rmse,
        });
        if best.as_ref().is_none_or(|(mae, _, _)| val.mae < *mae) {
            best = Some((val.mae, epoch, model.params().to_vec()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    let model = Model::from_params(*model.spec(), params)?;
    let log = TrainLog {
        arch: model.spec().arch.name().to_string(),
        seed,
        epochs,
        best_epoch,
        steps: adam.steps(),
        wall_time_secs: clock.elapsed().as_secs_f64(),
        checkpoint_id: None,
    };
    Ok((model, log))
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
            // exact, where summing and dividing could be off by an ulp
            return Self {
                mean: values[0],
                sd: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            sd: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub model: Model,
    pub log: TrainLog,
    pub val: Metric,
    pub test: Metric,
}

/// Builds, trains and scores one model.
pub fn run_single(
    arch: Architecture,
    share_weights: bool,
    data: &Prepared,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunResult> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Data("empty training stream".into()))?;
    let n = first.streams[0].len();
    let h = first.target.rows() / data.stations;
    let mut spec = ModelSpec::new(arch, data.stations, n, h);
    spec.share_weights = share_weights;
    let model = Model::build(spec, seed)?;
    let (model, log) = train(model, &data.train, &data.val, cfg, seed)?;
    let val = evaluation::score(&model, &data.val)?;
    let test = evaluation::score(&model, &data.test)?;
    Ok(RunResult {
        seed,
        model,
        log,
        val,
        test,
    })
}

/// One row of the results table, in standardised units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub arch: String,
    pub runs: usize,
    pub val_mae: MeanSd,
    pub val_rmse: MeanSd,
    pub test_mae: MeanSd,
    pub test_rmse: MeanSd,
}

impl Summary {
    pub fn from_runs(arch: Architecture, runs: &[RunResult]) -> Self {
        let col =
            |f: &dyn Fn(&RunResult) -> f64| MeanSd::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            arch: arch.name().to_string(),
            runs: runs.len(),
            val_mae: col(&|r| r.val.mae),
            val_rmse: col(&|r| r.val.rmse),
            test_mae: col(&|r| r.test.mae),
            test_rmse: col(&|r| r.test.rmse),
        }
    }
}

pub const SUMMARY_HEADER: &str = "arch,runs,val_mae_mean,val_mae_sd,val_rmse_mean,val_rmse_sd,\
test_mae_mean,test_mae_sd,test_rmse_mean,test_rmse_sd";

/// CSV table, one row per architecture.
pub fn summary_csv(rows: &[Summary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.arch,
            r.runs,
            r.val_mae.mean,
            r.val_mae.sd,
            r.val_rmse.mean,
            r.val_rmse.sd,
            r.test_mae.mean,
            r.test_mae.sd,
            r.test_rmse.mean,
            r.test_rmse.sd
        );
    }
    out
}

/// Fixed-width table for the terminal.
pub fn summary_table(rows: &[Summary]) -> String {
    let mut out = format!(
        "{:<16} {:>17} {:>17} {:>17} {:>17}\n",
        "model", "val MAE", "val RMSE", "test MAE", "test RMSE"
    );
    let cell = |m: &MeanSd| format!("{:.4}±{:.4}", m.mean, m.sd);
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>17} {:>17} {:>17} {:>17}",
            r.arch,
            cell(&r.val_mae),
            cell(&r.val_rmse),
            cell(&r.test_mae),
            cell(&r.test_rmse)
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub summary: Summary,
    pub runs: Vec<RunResult>,
}

/// Trains `cfg.runs` independent models (in parallel) and aggregates.
pub fn run_experiment(
    arch: Architecture,
    share_weights: bool,
    data: &Prepared,
    cfg: &TrainConfig,
) -> Result<Experiment> {
    cfg.validate()?;
    let runs: Vec<RunResult> = cfg.seeds[..cfg.runs]
        .par_iter()
        .map(|&seed| run_single(arch, share_weights, data, cfg, seed))
        .collect::<Result<_>>()?;
    Ok(Experiment {
        summary: Summary::from_runs(arch, &runs),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn zero_gradient_from_zero_moments_is_a_no_op() {
        let mut p = vec![0.5, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let c = TrainConfig { l2: 0.0, ..cfg() };
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &c).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn first_step_by_hand() {
        // from zero moments the bias-corrected ratio is g / (|g| + eps)
        let c = TrainConfig { l2: 0.0, ..cfg() };
        let g = 0.3;
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut p, &[g], &mut m, &mut v, 1, &c).unwrap();
        let expected = 1.0 - 1e-3 * g / (g + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let c = TrainConfig { l2: 0.0, ..cfg() };
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let mut last = 0.0;
        for t in 1..=5000 {
            let before = p[0];
            adam_step(&mut p, &[-4.0], &mut m, &mut v, t, &c).unwrap();
            last = p[0] - before;
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let err = adam_step(&mut p, &[f64::NAN], &mut m, &mut v, 1, &cfg()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn l2_alone_shrinks_the_norm() {
        let mut p = vec![0.7, -1.3, 2.2];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let norm = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        for t in 1..=50 {
            let before = norm(&p);
            adam_step(&mut p, &[0.0; 3], &mut m, &mut v, t, &cfg()).unwrap();
            assert!(norm(&p) < before);
        }
    }

    #[test]
    fn mse_by_hand() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(2, 2, vec![3.0; 4]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let l = mse_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).data()[0], 4.0);
        g.backward(l).unwrap();
        // 2 (pred - target) / 4
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn masked_mse_ignores_hidden_cells() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 100.0, 3.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let m = g.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
        let l = masked_mse_loss(&mut g, a, b, m).unwrap();
        assert_eq!(g.value(l).data()[0], 2.5);
    }

    #[test]
    fn population_sd() {
        assert_eq!(MeanSd::of(&[0.3]).sd, 0.0);
        let s = MeanSd::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.sd), (2.0, 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TrainConfig {
            beta1: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            max_epochs: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { runs: 6, ..cfg() }.validate().is_err());
        assert!(TrainConfig {
            learning_rate: -1.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
