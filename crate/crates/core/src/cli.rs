//! `flowcast` command line: synth, train, eval and sweep.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, FlowDataset, SplitPercent, WindowConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalMeta, SweepProtocol, View};
use crate::hybrid::Architecture;
use crate::imputation::Method;
use crate::pipeline::{self, PipelineConfig};
use crate::synthgen::{self, SynthConfig};
use crate::training::{self, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepScope {
    /// One model trained on complete data, gaps injected into test days.
    #[default]
    Test,
    /// Gaps injected everywhere, one model trained per ratio and seed.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    /// Injection seeds averaged at every ratio.
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub scope: SweepScope,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: evaluation::default_ratio_grid(),
            seeds: vec![1, 2, 3, 4, 5],
            methods: Method::ALL.to_vec(),
            scope: SweepScope::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Flow CSV; takes precedence over `synth` when reading.
    pub path: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

fn default_archs() -> Vec<String> {
    vec!["LSTM2-SP-CNN3".into()]
}

fn default_method() -> Method {
    Method::Mean
}

/// Contents of the TOML experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    /// Architecture names, or `"all"`.
    #[serde(default = "default_archs")]
    pub archs: Vec<String>,
    #[serde(default)]
    pub share_weights: bool,
    #[serde(default = "default_method")]
    pub imputation: Method,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub split: SplitPercent,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            archs: default_archs(),
            share_weights: false,
            imputation: default_method(),
            window: WindowConfig::default(),
            split: SplitPercent::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.out.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn architectures(&self) -> Result<Vec<Architecture>> {
        if self.archs.iter().any(|a| a == "all") {
            return Ok(Architecture::ALL.to_vec());
        }
        if self.archs.is_empty() {
            return Err(Error::Config("no architecture selected".into()));
        }
        self.archs.iter().map(|a| a.parse()).collect()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            window: self.window,
            split: self.split,
            method: self.imputation,
        }
    }

    /// SHA-256 of the effective configuration, output directory excluded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "flowcast",
    version,
    about = "Hybrid LSTM/CNN traffic flow forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic flow CSV and station sidecar.
    Synth(SynthArgs),
    /// Train architectures and write checkpoints plus a results table.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test days.
    Eval(EvalArgs),
    /// Error versus injected missing ratio.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file (synth) or directory (other commands).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub stations: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Flow CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Architecture name or `all`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub impute: Option<Method>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated subset of horizon, tod, dow, station.
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<View>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model, required with `--scope test`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Architecture retrained with `--scope all`.
    #[arg(long)]
    pub arch: Option<String>,
    /// Comma-separated methods compared on injected gaps.
    #[arg(long, value_delimiter = ',')]
    pub impute: Option<Vec<Method>>,
    /// Comma-separated missing ratios, ascending, including 0.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub scope: Option<SweepScope>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl clap::builder::ValueParserFactory for Method {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Method>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for View {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<View>().map_err(|e| e.to_string()))
    }
}

fn base_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn output_dir(common: &CommonArgs, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Seeds `first, first + 1, ...` for `count` runs.
fn seed_range(first: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| first + i).collect()
}

fn apply_runs(train: &mut TrainConfig, runs: Option<usize>, seed: Option<u64>) {
    if let Some(r) = runs {
        train.runs = r;
    }
    if let Some(s) = seed {
        train.seeds = seed_range(s, train.runs);
    }
}

/// Cleaned dataset plus a content digest.
fn load_data(cfg: &ExperimentConfig) -> Result<(FlowDataset, String)> {
    let (ds, digest) = match (&cfg.data.path, &cfg.data.synth) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "dataset {} does not exist",
                    path.display()
                )));
            }
            let mut hasher = Sha256::new();
            hasher.update(std::fs::read(path)?);
            let sidecar = dataset::sidecar_path(path);
            if sidecar.exists() {
                hasher.update(std::fs::read(sidecar)?);
            }
            (dataset::load_csv(path)?, hex::encode(hasher.finalize()))
        }
        (None, Some(synth)) => (
            synthgen::generate(synth)?,
            hex::encode(Sha256::digest(serde_json::to_vec(synth)?)),
        ),
        (None, None) => {
            return Err(Error::Config(
                "no dataset: pass --data or set data.path / data.synth in the config".into(),
            ))
        }
    };
    Ok((dataset::clean(&ds), digest))
}

fn provenance(cfg: &ExperimentConfig, data_digest: &str) -> Result<String> {
    Ok(format!(
        "# flowcast {}\n# config-sha256 {}\n# data-sha256 {data_digest}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.digest()?
    ))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let cfg = base_config(&args.common)?;
    let mut synth = cfg.data.synth.clone().unwrap_or_default();
    if let Some(p) = args.stations {
        synth.p = p;
    }
    if let Some(d) = args.days {
        synth.days = d;
    }
    if let Some(s) = args.common.seed {
        synth.seed = s;
    }
    let ds = synthgen::generate(&synth)?;
    let path = args
        .common
        .out
        .clone()
        .or(cfg.data.path)
        .unwrap_or_else(|| PathBuf::from("flows.csv"));
    dataset::save_csv(&ds, &path)?;
    println!(
        "wrote {} ({} stations, {} rows, {} missing cells)",
        path.display(),
        ds.num_stations(),
        ds.len(),
        ds.missing_count()
    );
    Ok(path)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = base_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(a) = &args.arch {
        cfg.archs = vec![a.clone()];
    }
    if let Some(m) = args.impute {
        cfg.imputation = m;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    apply_runs(&mut cfg.train, args.runs, args.common.seed);
    cfg.train.validate()?;
    let archs = cfg.architectures()?;
    let out = output_dir(&args.common, &cfg);
    let (ds, data_digest) = load_data(&cfg)?;
    let header = provenance(&cfg, &data_digest)?;
    let pipe = cfg.pipeline();
    let data = pipeline::prepare(&ds, &ds, &pipe, None)?;

    let mut summaries = Vec::new();
    let mut runs_csv =
        format!("{header}arch,seed,best_epoch,val_mae,val_rmse,test_mae,test_rmse\n");
    let mut log = String::new();
    for arch in archs {
        let exp = training::run_experiment(arch, cfg.share_weights, &data, &cfg.train)?;
        for run in &exp.runs {
            let ckpt = Checkpoint::new(&run.model, run.seed, &pipe, &data.standardizer);
            ckpt.save(
                &out.join("checkpoints")
                    .join(format!("{}-seed{}.json", arch, run.seed)),
            )?;
            let mut entry = run.log.clone();
            entry.checkpoint_id = Some(ckpt.id()?);
            log += &entry.to_jsonl()?;
            let _ = writeln!(
                runs_csv,
                "{},{},{},{},{},{},{}",
                arch,
                run.seed,
                run.log.best_epoch,
                run.val.mae,
                run.val.rmse,
                run.test.mae,
                run.test.rmse
            );
        }
        summaries.push(exp.summary);
    }
    write(
        &out.join("summary.csv"),
        &(header.clone() + &training::summary_csv(&summaries)),
    )?;
    write(&out.join("runs.csv"), &runs_csv)?;
    write(&out.join("train_log.jsonl"), &log)?;
    print!("{}", training::summary_table(&summaries));
    Ok(out)
}

#[derive(Serialize)]
struct WithProvenance<'a, T: Serialize> {
    artifact_version: &'static str,
    config_sha256: String,
    data_sha256: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let mut cfg = base_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.data.path = Some(d.clone());
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    let pipe = ckpt.pipeline();
    let (ds, data_digest) = load_data(&cfg)?;
    if ds.num_stations() != ckpt.spec.p {
        return Err(Error::Data(format!(
            "checkpoint expects {} stations, dataset has {}",
            ckpt.spec.p,
            ds.num_stations()
        )));
    }
    let split = dataset::split(ds.num_days(), pipe.split)?;
    let imputer = crate::imputation::fit(pipe.method, &ds, split.train)?;
    let test = pipeline::test_batches(&ds, &ds, &imputer, &imputer, &ckpt.standardizer, &pipe)?;
    let views = args.views.clone().unwrap_or_else(|| View::ALL.to_vec());
    let meta = EvalMeta {
        arch: Some(ckpt.spec.arch.name().to_string()),
        imputation: Some(pipe.method.name().to_string()),
        missing_ratio: 0.0,
        seed: Some(ckpt.seed),
    };
    let report = evaluation::evaluate(&model, &test, ds.start(), &views, meta)?;
    let out = output_dir(&args.common, &cfg);
    let header = provenance(&cfg, &data_digest)?;
    write(&out.join("eval.csv"), &(header + &report.to_csv()))?;
    let wrapped = WithProvenance {
        artifact_version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.digest()?,
        data_sha256: &data_digest,
        body: &report,
    };
    write(
        &out.join("eval.json"),
        &(serde_json::to_string_pretty(&wrapped)? + "\n"),
    )?;
    println!(
        "{} test MAE {} RMSE {} over {} cells",
        ckpt.spec.arch,
        report.overall.mae.unwrap_or(f64::NAN),
        report.overall.rmse.unwrap_or(f64::NAN),
        report.overall.count
    );
    Ok(out)
}

/// Ratio of the MAE at 0.21 to the MAE at 0, per method.
#[derive(Serialize)]
struct Degradation {
    method: Method,
    ratio: f64,
    relative_mae: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<PathBuf> {
    let mut cfg = base_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(a) = &args.arch {
        cfg.archs = vec![a.clone()];
    }
    if let Some(m) = &args.impute {
        cfg.sweep.methods = m.clone();
    }
    if let Some(r) = &args.ratios {
        cfg.sweep.ratios = r.clone();
    }
    if let Some(s) = args.scope {
        cfg.sweep.scope = s;
    }
    if let Some(s) = args.common.seed {
        cfg.sweep.seeds = seed_range(s, cfg.sweep.seeds.len().max(1));
    }
    if let Some(r) = args.runs {
        cfg.sweep.seeds = seed_range(cfg.sweep.seeds.first().copied().unwrap_or(1), r);
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if cfg.sweep.methods.is_empty() {
        return Err(Error::Config("no imputation method to sweep".into()));
    }

    let loaded = match cfg.sweep.scope {
        SweepScope::Test => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                Error::Config("complete-train sweep (--scope test) needs --checkpoint".into())
            })?;
            let ckpt = Checkpoint::load(path)?;
            let model = ckpt.to_model()?;
            // the checkpoint fixes preprocessing
            cfg.window = ckpt.window;
            cfg.split = ckpt.split;
            cfg.imputation = ckpt.imputation;
            Some((ckpt, model))
        }
        SweepScope::All => None,
    };
    let archs = cfg.architectures()?;
    let (ds, data_digest) = load_data(&cfg)?;
    let pipe = cfg.pipeline();
    let protocol = match &loaded {
        Some((ckpt, model)) => SweepProtocol::CompleteTrain {
            model,
            standardizer: &ckpt.standardizer,
        },
        None => {
            if archs.len() != 1 {
                return Err(Error::Config(
                    "retrain sweep needs exactly one architecture".into(),
                ));
            }
            cfg.train.validate()?;
            SweepProtocol::Retrain {
                arch: archs[0],
                share_weights: cfg.share_weights,
                train: &cfg.train,
            }
        }
    };

    let mut points = Vec::new();
    for &method in &cfg.sweep.methods {
        points.extend(evaluation::robustness_sweep(
            &protocol,
            &ds,
            &pipe,
            method,
            &cfg.sweep.ratios,
            &cfg.sweep.seeds,
        )?);
    }
    let degradation: Vec<Degradation> = cfg
        .sweep
        .methods
        .iter()
        .filter_map(|&m| {
            let at = |r: f64| points.iter().find(|p| p.method == m && p.ratio == r);
            Some(Degradation {
                method: m,
                ratio: 0.21,
                relative_mae: at(0.21)?.mae.mean / at(0.0)?.mae.mean,
            })
        })
        .collect();

    let out = output_dir(&args.common, &cfg);
    let header = provenance(&cfg, &data_digest)?;
    write(
        &out.join("sweep.csv"),
        &(header + &evaluation::sweep_csv(&points)),
    )?;
    #[derive(Serialize)]
    struct Body<'a> {
        scope: SweepScope,
        points: &'a [evaluation::SweepPoint],
        degradation: &'a [Degradation],
    }
    let body = Body {
        scope: cfg.sweep.scope,
        points: &points,
        degradation: &degradation,
    };
    let wrapped = WithProvenance {
        artifact_version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.digest()?,
        data_sha256: &data_digest,
        body: &body,
    };
    write(
        &out.join("sweep.json"),
        &(serde_json::to_string_pretty(&wrapped)? + "\n"),
    )?;
    print!("{}", evaluation::sweep_csv(&points));
    for d in &degradation {
        println!("{} MAE(0.21)/MAE(0) = {:.4}", d.method, d.relative_mae);
    }
    Ok(out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Sweep(a) => cmd_sweep(a).map(drop),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
