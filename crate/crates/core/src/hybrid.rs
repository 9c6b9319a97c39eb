//! The twelve hybrid LSTM/CNN architectures.
//!
//! Each of the three input streams (near-term, previous day, previous week)
//! runs through the same topology with its own parameters. The stream
//! outputs are flattened, concatenated and mapped by one dense head to
//! `p * h` predictions.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::dataset::WindowSample;
use crate::error::{Error, Result};
use crate::layers::{self, ConvParams, ConvStackSpec, LstmParams, LstmVars};

/// Number of input streams: near-term, daily, weekly.
pub const STREAMS: usize = 3;

/// How the LSTM and CNN blocks of one stream are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TopologyKind {
    LstmOnly,
    /// LSTM, then CNN on its output.
    SeriesLstmCnn,
    /// CNN, then LSTM on its output.
    SeriesCnnLstm,
    /// LSTM and CNN side by side on the input.
    Parallel,
    /// LSTM on the input, CNN on the LSTM output, both outputs kept.
    SeriesParallelD,
    /// CNN on the input, LSTM on the CNN output, both outputs kept.
    SeriesParallelE,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Topology {
    pub kind: TopologyKind,
    pub lstm_depth: usize,
    pub cnn_depth: usize,
}

impl Topology {
    pub fn new(kind: TopologyKind, lstm_depth: usize, cnn_depth: usize) -> Result<Self> {
        let ok = match kind {
            TopologyKind::LstmOnly => cnn_depth == 0 && matches!(lstm_depth, 1 | 2),
            _ => matches!((lstm_depth, cnn_depth), (1, 1) | (2, 3)),
        };
        if !ok {
            return Err(Error::Config(format!(
                "no architecture with {kind:?}, {lstm_depth} LSTM and {cnn_depth} CNN layers"
            )));
        }
        Ok(Self {
            kind,
            lstm_depth,
            cnn_depth,
        })
    }

    pub fn conv_spec(&self) -> Option<ConvStackSpec> {
        match self.cnn_depth {
            0 => None,
            1 => Some(ConvStackSpec::single()),
            _ => Some(ConvStackSpec::triple()),
        }
    }

    /// Rows of the per-step stream output, in units of `p`.
    pub fn width_factor(&self) -> usize {
        match self.kind {
            TopologyKind::LstmOnly | TopologyKind::SeriesLstmCnn | TopologyKind::SeriesCnnLstm => 1,
            _ => 2,
        }
    }
}

/// The named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Lstm1,
    Lstm2,
    Lstm1SCnn1,
    Lstm2SCnn3,
    Cnn1SLstm1,
    Cnn3SLstm2,
    Lstm1PCnn1,
    Lstm2PCnn3,
    Lstm1SpCnn1,
    Lstm2SpCnn3,
    Cnn1SpLstm1,
    Cnn3SpLstm2,
}

impl Architecture {
    pub const ALL: [Architecture; 12] = [
        Architecture::Lstm1,
        Architecture::Lstm2,
        Architecture::Lstm1SCnn1,
        Architecture::Lstm2SCnn3,
        Architecture::Cnn1SLstm1,
        Architecture::Cnn3SLstm2,
        Architecture::Lstm1PCnn1,
        Architecture::Lstm2PCnn3,
        Architecture::Lstm1SpCnn1,
        Architecture::Lstm2SpCnn3,
        Architecture::Cnn1SpLstm1,
        Architecture::Cnn3SpLstm2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lstm1 => "LSTM1",
            Architecture::Lstm2 => "LSTM2",
            Architecture::Lstm1SCnn1 => "LSTM1-S-CNN1",
            Architecture::Lstm2SCnn3 => "LSTM2-S-CNN3",
            Architecture::Cnn1SLstm1 => "CNN1-S-LSTM1",
            Architecture::Cnn3SLstm2 => "CNN3-S-LSTM2",
            Architecture::Lstm1PCnn1 => "LSTM1-P-CNN1",
            Architecture::Lstm2PCnn3 => "LSTM2-P-CNN3",
            Architecture::Lstm1SpCnn1 => "LSTM1-SP-CNN1",
            Architecture::Lstm2SpCnn3 => "LSTM2-SP-CNN3",
            Architecture::Cnn1SpLstm1 => "CNN1-SP-LSTM1",
            Architecture::Cnn3SpLstm2 => "CNN3-SP-LSTM2",
        }
    }

    pub fn topology(self) -> Topology {
        use TopologyKind::*;
        let (kind, l, c) = match self {
            Architecture::Lstm1 => (LstmOnly, 1, 0),
            Architecture::Lstm2 => (LstmOnly, 2, 0),
            Architecture::Lstm1SCnn1 => (SeriesLstmCnn, 1, 1),
            Architecture::Lstm2SCnn3 => (SeriesLstmCnn, 2, 3),
            Architecture::Cnn1SLstm1 => (SeriesCnnLstm, 1, 1),
            Architecture::Cnn3SLstm2 => (SeriesCnnLstm, 2, 3),
            Architecture::Lstm1PCnn1 => (Parallel, 1, 1),
            Architecture::Lstm2PCnn3 => (Parallel, 2, 3),
            Architecture::Lstm1SpCnn1 => (SeriesParallelD, 1, 1),
            Architecture::Lstm2SpCnn3 => (SeriesParallelD, 2, 3),
            Architecture::Cnn1SpLstm1 => (SeriesParallelE, 1, 1),
            Architecture::Cnn3SpLstm2 => (SeriesParallelE, 2, 3),
        };
        Topology {
            kind,
            lstm_depth: l,
            cnn_depth: c,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Architecture::name).join(", ")
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture {s:?}; valid names: {}",
                    Self::valid_names()
                ))
            })
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Stations.
    pub p: usize,
    /// Steps per input stream.
    pub n: usize,
    /// Forecast horizon.
    pub h: usize,
    #[serde(default)]
    pub share_weights: bool,
}

impl ModelSpec {
    pub fn new(arch: Architecture, p: usize, n: usize, h: usize) -> Self {
        Self {
            arch,
            p,
            n,
            h,
            share_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 || self.h == 0 {
            return Err(Error::Config(format!(
                "degenerate model dimensions {self:?}"
            )));
        }
        if let Some(conv) = self.arch.topology().conv_spec() {
            if conv.max_kernel() > self.p {
                return Err(Error::Config(format!(
                    "{} needs at least {} stations, got {}",
                    self.arch,
                    conv.max_kernel(),
                    self.p
                )));
            }
        }
        Ok(())
    }

    pub fn head_inputs(&self) -> usize {
        STREAMS * self.arch.topology().width_factor() * self.p * self.n
    }

    pub fn head_outputs(&self) -> usize {
        self.p * self.h
    }

    fn parameter_groups(&self) -> usize {
        if self.share_weights {
            1
        } else {
            STREAMS
        }
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let topo = self.arch.topology();
        let p = self.p;
        let mut out = Vec::new();
        for group in 0..self.parameter_groups() {
            for layer in 0..topo.lstm_depth {
                for (prefix, shape) in [("W", vec![p, p]), ("U", vec![p, p]), ("b", vec![p])] {
                    for gate in layers::GATES {
                        out.push((
                            format!("stream{group}.lstm{layer}.{prefix}_{gate}"),
                            shape.clone(),
                        ));
                    }
                }
            }
            if let Some(conv) = topo.conv_spec() {
                for (layer, shape) in conv.layer_shapes().into_iter().enumerate() {
                    out.push((format!("stream{group}.conv{layer}.kernel"), shape.to_vec()));
                    out.push((format!("stream{group}.conv{layer}.bias"), vec![shape[0]]));
                }
            }
        }
        out.push((
            "head.weight".into(),
            vec![self.head_outputs(), self.head_inputs()],
        ));
        out.push(("head.bias".into(), vec![self.head_outputs()]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// A batch of windows laid out for the graph: for each stream, `n`
/// step matrices of shape `[p, batch]`; targets as `[p * h, batch]` with
/// row `s * h + k` holding station `s`, horizon step `k`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub streams: [Vec<Tensor>; STREAMS],
    pub target: Tensor,
    /// 1.0 where the target cell was observed, else 0.0.
    pub target_mask: Tensor,
    /// Prediction time of each column.
    pub times: Vec<usize>,
}

fn stream_blocks(w: &WindowSample) -> [&crate::dataset::Block; STREAMS] {
    [&w.near, &w.daily, &w.weekly]
}

impl Batch {
    pub fn from_samples(samples: &[WindowSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let p = first.near.values.rows();
        let h = first.target.values.cols();
        let size = samples.len();
        let streams: [Vec<Tensor>; STREAMS] = std::array::from_fn(|k| {
            let width = stream_blocks(first)[k].values.cols();
            (0..width)
                .map(|t| {
                    let mut data = vec![0.0; p * size];
                    for (b, w) in samples.iter().enumerate() {
                        let block = &stream_blocks(w)[k].values;
                        for s in 0..p {
                            data[s * size + b] = block.at(s, t);
                        }
                    }
                    Tensor::matrix(p, size, data).expect("non-empty")
                })
                .collect()
        });
        for w in samples {
            for block in stream_blocks(w) {
                if block.values.rows() != p {
                    return Err(Error::Data("samples disagree on station count".into()));
                }
            }
        }
        if streams.iter().any(|s| s.iter().any(|m| !m.is_finite())) {
            return Err(Error::Data(
                "input windows contain missing values; impute before batching".into(),
            ));
        }
        let mut target = vec![0.0; p * h * size];
        let mut mask = vec![0.0; p * h * size];
        for (b, w) in samples.iter().enumerate() {
            if w.target.values.shape() != [p, h] {
                return Err(Error::Data("samples disagree on horizon".into()));
            }
            for s in 0..p {
                for k in 0..h {
                    if w.target.mask[s * h + k] {
                        target[(s * h + k) * size + b] = w.target.values.at(s, k);
                        mask[(s * h + k) * size + b] = 1.0;
                    }
                }
            }
        }
        Ok(Self {
            streams,
            target: Tensor::matrix(p * h, size, target)?,
            target_mask: Tensor::matrix(p * h, size, mask)?,
            times: samples.iter().map(|w| w.t).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn stations(&self) -> usize {
        self.streams[0][0].rows()
    }
}

/// Parameters of one built architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

struct StreamVars {
    lstm: Vec<LstmVars>,
    conv: Vec<(Var, Var)>,
}

impl Model {
    /// Deterministically initialised model.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = spec.arch.topology();
        let mut params = Vec::new();
        for _ in 0..spec.parameter_groups() {
            for _ in 0..topo.lstm_depth {
                params.extend(LstmParams::init(spec.p, spec.p, &mut rng).into_tensors());
            }
            if let Some(conv) = topo.conv_spec() {
                for shape in conv.layer_shapes() {
                    let layer = ConvParams::init(shape, &mut rng);
                    params.push(layer.kernels);
                    params.push(layer.bias);
                }
            }
        }
        let (out, inp) = (spec.head_outputs(), spec.head_inputs());
        params.push(layers::glorot(&[out, inp], inp, out, &mut rng));
        params.push(Tensor::zeros(&[out]));
        Ok(Self { spec, params })
    }

    /// Wraps existing tensors after checking them against the manifest.
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let manifest = spec.manifest();
        if manifest.len() != params.len()
            || manifest
                .iter()
                .zip(&params)
                .any(|((_, shape), t)| t.shape() != shape.as_slice())
        {
            return Err(Error::Checkpoint(format!(
                "parameters do not match the {} manifest",
                spec.arch
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records all parameters on `g`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn stream_vars(&self, vars: &[Var]) -> Vec<StreamVars> {
        let topo = self.spec.arch.topology();
        let conv_layers = topo.conv_spec().map_or(0, |c| c.depth());
        let mut cursor = 0;
        let mut out = Vec::new();
        for _ in 0..self.spec.parameter_groups() {
            let lstm = (0..topo.lstm_depth)
                .map(|_| {
                    let v = LstmVars::from_slice(&vars[cursor..cursor + 12]);
                    cursor += 12;
                    v
                })
                .collect();
            let conv = (0..conv_layers)
                .map(|_| {
                    let v = (vars[cursor], vars[cursor + 1]);
                    cursor += 2;
                    v
                })
                .collect();
            out.push(StreamVars { lstm, conv });
        }
        out
    }

    fn apply_stream(&self, g: &mut Graph, sv: &StreamVars, seq: &[Var]) -> Result<Vec<Var>> {
        let lstm = |g: &mut Graph, seq: &[Var]| -> Result<Vec<Var>> {
            let mut x = seq.to_vec();
            for layer in &sv.lstm {
                x = layers::lstm_layer(g, layer, &x)?;
            }
            Ok(x)
        };
        let cnn = |g: &mut Graph, seq: &[Var]| layers::conv_stack(g, &sv.conv, seq);
        let join = |g: &mut Graph, a: &[Var], b: &[Var]| -> Result<Vec<Var>> {
            a.iter()
                .zip(b)
                .map(|(x, y)| g.concat(&[*x, *y], 0))
                .collect()
        };
        match self.spec.arch.topology().kind {
            TopologyKind::LstmOnly => lstm(g, seq),
            TopologyKind::SeriesLstmCnn => {
                let l = lstm(g, seq)?;
                cnn(g, &l)
            }
            TopologyKind::SeriesCnnLstm => {
                let c = cnn(g, seq)?;
                lstm(g, &c)
            }
            TopologyKind::Parallel => {
                let l = lstm(g, seq)?;
                let c = cnn(g, seq)?;
                join(g, &l, &c)
            }
            TopologyKind::SeriesParallelD => {
                let l = lstm(g, seq)?;
                let c = cnn(g, &l)?;
                join(g, &l, &c)
            }
            TopologyKind::SeriesParallelE => {
                let c = cnn(g, seq)?;
                let l = lstm(g, &c)?;
                join(g, &c, &l)
            }
        }
    }

    /// Flattened head input `[head_inputs, batch]` for registered `vars`.
    pub fn features(&self, g: &mut Graph, vars: &[Var], batch: &Batch) -> Result<Var> {
        let spec = &self.spec;
        if batch.stations() != spec.p {
            return Err(Error::shape(
                "model input stations",
                &[spec.p],
                &[batch.stations()],
            ));
        }
        let groups = self.stream_vars(vars);
        let mut flat = Vec::with_capacity(STREAMS);
        for (k, stream) in batch.streams.iter().enumerate() {
            if stream.len() != spec.n {
                return Err(Error::shape("stream width", &[spec.n], &[stream.len()]));
            }
            let seq: Vec<Var> = stream.iter().map(|t| g.constant(t.clone())).collect();
            let sv = &groups[if spec.share_weights { 0 } else { k }];
            let out = self.apply_stream(g, sv, &seq)?;
            flat.push(g.concat(&out, 0)?);
        }
        g.concat(&flat, 0)
    }

    /// Predictions `[p * h, batch]`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], batch: &Batch) -> Result<Var> {
        let features = self.features(g, vars, batch)?;
        let n = vars.len();
        layers::dense(g, vars[n - 2], vars[n - 1], features)
    }

    /// Inference on a batch without gradient bookkeeping.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, batch)?;
        Ok(g.value(out).clone())
    }

    /// `[p, h]` forecast for one window.
    pub fn forward(&self, sample: &WindowSample) -> Result<Tensor> {
        let batch = Batch::from_samples(std::slice::from_ref(sample))?;
        self.predict(&batch)?.reshaped(&[self.spec.p, self.spec.h])
    }
}
