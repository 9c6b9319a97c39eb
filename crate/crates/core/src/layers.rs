//! LSTM, station-axis convolution and dense building blocks.
//!
//! Every block works on a *sequence*: a list of `n` graph values, one per
//! time step, each shaped `[p, batch]` (stations down the rows, independent
//! samples across the columns). LSTM and convolution blocks return a
//! sequence of the same shape, so blocks compose freely.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gate order used for every per-gate array: forget, input, candidate, output.
pub const GATES: [&str; 4] = ["f", "i", "c", "o"];

/// Uniform Glorot initialisation with limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-limit..limit);
    }
    t
}

/// Weights of one LSTM layer, stored per gate in [`GATES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// Input weights, each `[hidden, input]`.
    pub w: [Tensor; 4],
    /// Recurrent weights, each `[hidden, hidden]`.
    pub u: [Tensor; 4],
    /// Biases, each `[hidden]`.
    pub b: [Tensor; 4],
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Tensor::zeros(&[hidden, input])),
            u: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    /// Glorot weights, zero biases except the forget gate bias which is 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = std::array::from_fn(|_| glorot(&[hidden, input], input, hidden, rng));
        let u = std::array::from_fn(|_| glorot(&[hidden, hidden], hidden, hidden, rng));
        let mut b: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[hidden]));
        b[0] = Tensor::full(&[hidden], 1.0);
        Self { w, u, b }
    }

    pub fn input(&self) -> usize {
        self.w[0].shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w[0].shape()[0]
    }

    /// Tensors in manifest order with their local names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(12);
        for (prefix, group) in [("W", &self.w), ("U", &self.u), ("b", &self.b)] {
            for (gate, t) in GATES.iter().zip(group) {
                out.push((format!("{prefix}_{gate}"), t));
            }
        }
        out
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.w.into_iter().chain(self.u).chain(self.b).collect()
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> LstmVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        LstmVars {
            w: std::array::from_fn(|k| reg(&self.w[k])),
            u: std::array::from_fn(|k| reg(&self.u[k])),
            b: std::array::from_fn(|k| reg(&self.b[k])),
        }
    }
}

/// Graph handles of an [`LstmParams`] set.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
}

impl LstmVars {
    /// Builds handles from 12 consecutive vars in manifest order (W, U, b).
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            w: std::array::from_fn(|k| vars[k]),
            u: std::array::from_fn(|k| vars[4 + k]),
            b: std::array::from_fn(|k| vars[8 + k]),
        }
    }
}

/// Hidden and cell vectors of an LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// One recurrence on the graph. `x` is `[input, batch]`, `h` and `c` are
/// `[hidden, batch]`. Returns the new `(h, c)`.
pub fn lstm_cell(g: &mut Graph, p: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let gate = |g: &mut Graph, k: usize| -> Result<Var> {
        let wx = g.matmul(p.w[k], x)?;
        let uh = g.matmul(p.u[k], h)?;
        let s = g.add(wx, uh)?;
        g.add_bias(s, p.b[k])
    };
    let f_pre = gate(g, 0)?;
    let i_pre = gate(g, 1)?;
    let z_pre = gate(g, 2)?;
    let o_pre = gate(g, 3)?;
    let f = g.sigmoid(f_pre);
    let i = g.sigmoid(i_pre);
    let z = g.tanh(z_pre);
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, z)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs an LSTM over `seq` from the oldest step to the newest, starting
/// from a zero state, and returns the hidden output of every step.
pub fn lstm_layer(g: &mut Graph, p: &LstmVars, seq: &[Var]) -> Result<Vec<Var>> {
    let first = seq
        .first()
        .ok_or_else(|| Error::Config("LSTM input sequence is empty".into()))?;
    let batch = g.shape(*first)[1];
    let hidden = g.shape(p.b[0])[0];
    let mut h = g.constant(Tensor::zeros(&[hidden, batch]));
    let mut c = g.constant(Tensor::zeros(&[hidden, batch]));
    let mut out = Vec::with_capacity(seq.len());
    for &x in seq {
        (h, c) = lstm_cell(g, p, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Single LSTM step on plain vectors.
pub fn lstm_step(params: &LstmParams, x: &[f64], prev: &LstmState) -> Result<LstmState> {
    let (input, hidden) = (params.input(), params.hidden());
    if x.len() != input || prev.h.len() != hidden || prev.c.len() != hidden {
        return Err(Error::shape(
            "lstm_step",
            &[input, hidden],
            &[x.len(), prev.h.len()],
        ));
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let xv = g.constant(Tensor::matrix(input, 1, x.to_vec())?);
    let hv = g.constant(Tensor::matrix(hidden, 1, prev.h.clone())?);
    let cv = g.constant(Tensor::matrix(hidden, 1, prev.c.clone())?);
    let (h, c) = lstm_cell(&mut g, &vars, xv, hv, cv)?;
    Ok(LstmState {
        h: g.value(h).data().to_vec(),
        c: g.value(c).data().to_vec(),
    })
}

/// Applies an LSTM to a `[p, n]` array column by column and returns the
/// `[hidden, n]` array of hidden outputs.
pub fn lstm_sequence(params: &LstmParams, seq: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let x = g.constant(seq.clone());
    let cols = columns(&mut g, x)?;
    let out = lstm_layer(&mut g, &vars, &cols)?;
    let joined = g.concat(&out, 1)?;
    Ok(g.value(joined).clone())
}

/// Splits a `[rows, n]` value into its `n` columns, each `[rows, 1]`.
pub fn columns(g: &mut Graph, x: Var) -> Result<Vec<Var>> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("columns", &shape, &[0, 0]));
    }
    (0..shape[1]).map(|j| g.slice(x, 1, j, 1)).collect()
}

/// Kernel sizes of a cascade of ReLU-activated convolutions over the
/// station axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvStackSpec {
    pub kernel_sizes: Vec<usize>,
    /// Channels between layers; the stack always maps 1 channel to 1.
    pub channels: usize,
}

impl ConvStackSpec {
    pub fn single() -> Self {
        Self {
            kernel_sizes: vec![4],
            channels: 1,
        }
    }

    pub fn triple() -> Self {
        Self {
            kernel_sizes: vec![4, 3, 2],
            channels: 1,
        }
    }

    pub fn depth(&self) -> usize {
        self.kernel_sizes.len()
    }

    /// `(c_out, c_in, k)` of every layer.
    pub fn layer_shapes(&self) -> Vec<[usize; 3]> {
        let last = self.depth().saturating_sub(1);
        self.kernel_sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let c_in = if i == 0 { 1 } else { self.channels };
                let c_out = if i == last { 1 } else { self.channels };
                [c_out, c_in, k]
            })
            .collect()
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(0)
    }
}

/// Kernels and bias of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn init(shape: [usize; 3], rng: &mut impl Rng) -> Self {
        let [c_out, c_in, k] = shape;
        Self {
            kernels: glorot(&shape, c_in * k, c_out * k, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

/// Applies the conv stack to a sequence of `[p, batch]` steps. All steps
/// share the kernels; each column is an independent length-`p` signal.
pub fn conv_stack(g: &mut Graph, layers: &[(Var, Var)], seq: &[Var]) -> Result<Vec<Var>> {
    let first = seq
        .first()
        .ok_or_else(|| Error::Config("conv input sequence is empty".into()))?;
    let [p, batch] = [g.shape(*first)[0], g.shape(*first)[1]];
    let n = seq.len();
    let joined = g.concat(seq, 1)?;
    let mut x = g.reshape(joined, &[1, p, n * batch])?;
    for &(kernels, bias) in layers {
        let k = g.shape(kernels)[2];
        if k > p {
            return Err(Error::Config(format!(
                "kernel size {k} exceeds station count {p}"
            )));
        }
        let y = g.conv1d_same(x, kernels, bias)?;
        x = g.relu(y);
    }
    let flat = g.reshape(x, &[p, n * batch])?;
    (0..n).map(|t| g.slice(flat, 1, t * batch, batch)).collect()
}

/// Eager convenience: conv stack over a `[p, n]` array.
pub fn conv_stack_array(layers: &[ConvParams], seq: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<(Var, Var)> = layers
        .iter()
        .map(|l| (g.constant(l.kernels.clone()), g.constant(l.bias.clone())))
        .collect();
    let x = g.constant(seq.clone());
    let cols = columns(&mut g, x)?;
    let out = conv_stack(&mut g, &vars, &cols)?;
    let joined = g.concat(&out, 1)?;
    Ok(g.value(joined).clone())
}

/// Affine map `weights * x + bias` with `x` shaped `[in, batch]`.
pub fn dense(g: &mut Graph, weights: Var, bias: Var, x: Var) -> Result<Var> {
    let wx = g.matmul(weights, x)?;
    g.add_bias(wx, bias)
}

/// Eager dense layer on a single vector.
pub fn dense_vector(weights: &Tensor, bias: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = g.constant(weights.clone());
    let b = g.constant(bias.clone());
    let xv = g.constant(Tensor::matrix(x.len(), 1, x.to_vec())?);
    let y = dense(&mut g, w, b, xv)?;
    Ok(g.value(y).data().to_vec())
}
