//! Dense reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output value and records its parents, so the node list is
//! already in topological order. [`Graph::backward`] walks the tape once in
//! reverse, accumulating adjoints only for nodes that depend on a parameter.
//!
//! All tensors are row-major `f64`.

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor extents must be positive, got {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector must be non-empty")
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Element `(i, j)` of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

/// Pointwise binary operation on equal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    /// `a[m x q] + b[m]` broadcast across columns.
    AddBias(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Conv1d {
        signal: Var,
        kernels: Var,
        bias: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        debug_assert!(
            value.is_finite() || parents.iter().any(|p| !self.value(*p).is_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf whose gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, q) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; m * q];
        for i in 0..m {
            let row = &mut out[i * q..(i + 1) * q];
            for l in 0..k {
                let av = ad[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[l * q..(l + 1) * q];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor {
            shape: vec![m, q],
            data: out,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("elementwise", sa, sb));
        }
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        let data: Vec<f64> = match op {
            Binary::Add => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            Binary::Sub => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
            Binary::Mul => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
        };
        let value = Tensor {
            shape: sa.to_vec(),
            data,
        };
        Ok(self.push(value, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds `bias[m]` to every column of `a[m x q]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let q = sa[1];
        let bd = &self.value(bias).data;
        let mut data = self.value(a).data.clone();
        for (row, b) in data.chunks_exact_mut(q).zip(bd) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor {
            shape: sa.to_vec(),
            data,
        };
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        let src = self.value(a);
        let f: fn(f64) -> f64 = match op {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
        };
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, Op::Unary(op, a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|x| x * factor).collect(),
        };
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = &self.value(a).data;
        let m = src.iter().sum::<f64>() / src.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Config(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut extent = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = extent;
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        if axis >= src_shape.len() || len == 0 || start + len > src_shape[axis] {
            return Err(Error::Config(format!(
                "slice [{start}, {}) on axis {axis} out of range for {src_shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&src_shape, axis);
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Same-length 1D cross-correlation along the second axis.
    ///
    /// `signal` is `[c_in, len]` or `[c_in, len, m]` where the trailing `m`
    /// columns are independent signals sharing the kernels. `kernels` is
    /// `[c_out, c_in, k]` and `bias` is `[c_out]`. Zero padding puts
    /// `(k - 1) / 2` positions on the left and the rest on the right.
    pub fn conv1d_same(&mut self, signal: Var, kernels: Var, bias: Var) -> Result<Var> {
        let ss = self.shape(signal).to_vec();
        let ks = self.shape(kernels).to_vec();
        let bs = self.shape(bias).to_vec();
        if !(ss.len() == 2 || ss.len() == 3) || ks.len() != 3 || ks[1] != ss[0] {
            return Err(Error::shape("conv1d_same", &ss, &ks));
        }
        if bs != [ks[0]] {
            return Err(Error::shape("conv1d_same bias", &bs, &ks));
        }
        let (c_in, len) = (ss[0], ss[1]);
        let m = ss.get(2).copied().unwrap_or(1);
        let (c_out, k) = (ks[0], ks[2]);
        if k > len {
            return Err(Error::Config(format!(
                "kernel size {k} exceeds signal length {len}"
            )));
        }
        let left = (k - 1) / 2;
        let x = &self.value(signal).data;
        let w = &self.value(kernels).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; c_out * len * m];
        for o in 0..c_out {
            for i in 0..len {
                let dst = &mut out[(o * len + i) * m..(o * len + i + 1) * m];
                dst.iter_mut().for_each(|v| *v = b[o]);
                for c in 0..c_in {
                    for q in 0..k {
                        let pos = i + q;
                        if pos < left || pos - left >= len {
                            continue;
                        }
                        let src_i = pos - left;
                        let wv = w[(o * c_in + c) * k + q];
                        let src = &x[(c * len + src_i) * m..(c * len + src_i + 1) * m];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let mut shape = vec![c_out, len];
        if ss.len() == 3 {
            shape.push(m);
        }
        let value = Tensor { shape, data: out };
        Ok(self.push(
            value,
            Op::Conv1d {
                signal,
                kernels,
                bias,
            },
            &[signal, kernels, bias],
        ))
    }

    /// Populates gradients of the scalar `loss` for every node that depends
    /// on a parameter. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", ls, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot =
            grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let q = self.shape(*b)[1];
                let ad = &self.value(*a).data;
                let bd = &self.value(*b).data;
                // ga[i, l] = sum_j g[i, j] * b[l, j]
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * q..(i + 1) * q];
                        for l in 0..k {
                            let brow = &bd[l * q..(l + 1) * q];
                            ga[i * k + l] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // gb[l, j] = sum_i a[i, l] * g[i, j]
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * q..(i + 1) * q];
                        for l in 0..k {
                            let av = ad[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in gb[l * q..(l + 1) * q].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Binary(op, a, b) => match op {
                Binary::Add => {
                    self.accumulate(grads, *a, |ga| add_into(ga, g));
                    self.accumulate(grads, *b, |gb| add_into(gb, g));
                }
                Binary::Sub => {
                    self.accumulate(grads, *a, |ga| add_into(ga, g));
                    self.accumulate(grads, *b, |gb| {
                        gb.iter_mut().zip(g).for_each(|(d, v)| *d -= v)
                    });
                }
                Binary::Mul => {
                    let (ad, bd) = (&self.value(*a).data, &self.value(*b).data);
                    self.accumulate(grads, *a, |ga| {
                        for ((d, v), y) in ga.iter_mut().zip(g).zip(bd) {
                            *d += v * y;
                        }
                    });
                    self.accumulate(grads, *b, |gb| {
                        for ((d, v), x) in gb.iter_mut().zip(g).zip(ad) {
                            *d += v * x;
                        }
                    });
                }
            },
            Op::AddBias(a, bias) => {
                let q = self.shape(*a)[1];
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *bias, |gb| {
                    for (d, row) in gb.iter_mut().zip(g.chunks_exact(q)) {
                        *d += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Unary(op, a) => {
                let y = &node.value.data;
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |ga| match op {
                    Unary::Sigmoid => {
                        for ((d, v), y) in ga.iter_mut().zip(g).zip(y) {
                            *d += v * y * (1.0 - y);
                        }
                    }
                    Unary::Tanh => {
                        for ((d, v), y) in ga.iter_mut().zip(g).zip(y) {
                            *d += v * (1.0 - y * y);
                        }
                    }
                    Unary::Relu => {
                        for ((d, v), x) in ga.iter_mut().zip(g).zip(x) {
                            if *x > 0.0 {
                                *d += v;
                            }
                        }
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v * factor)
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Concat { parts, axis } => {
                let (outer, extent, inner) = split_axis(&node.value.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let pe = self.shape(*p)[*axis];
                    self.accumulate(grads, *p, |gp| {
                        for o in 0..outer {
                            let src = o * extent * inner + offset * inner;
                            add_into(
                                &mut gp[o * pe * inner..(o + 1) * pe * inner],
                                &g[src..src + pe * inner],
                            );
                        }
                    });
                    offset += pe;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(*src), *axis);
                let len = node.value.shape[*axis];
                self.accumulate(grads, *src, |gs| {
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        add_into(
                            &mut gs[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Conv1d {
                signal,
                kernels,
                bias,
            } => {
                let ss = self.shape(*signal);
                let (c_in, len) = (ss[0], ss[1]);
                let m = ss.get(2).copied().unwrap_or(1);
                let ks = self.shape(*kernels);
                let (c_out, k) = (ks[0], ks[2]);
                let left = (k - 1) / 2;
                let x = &self.value(*signal).data;
                let w = &self.value(*kernels).data;
                let taps = |i: usize, q: usize| -> Option<usize> {
                    let pos = i + q;
                    (pos >= left && pos - left < len).then(|| pos - left)
                };
                self.accumulate(grads, *bias, |gb| {
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += g[o * len * m..(o + 1) * len * m].iter().sum::<f64>();
                    }
                });
                self.accumulate(grads, *kernels, |gw| {
                    for o in 0..c_out {
                        for i in 0..len {
                            let grow = &g[(o * len + i) * m..(o * len + i + 1) * m];
                            for c in 0..c_in {
                                for q in 0..k {
                                    let Some(si) = taps(i, q) else { continue };
                                    let src = &x[(c * len + si) * m..(c * len + si + 1) * m];
                                    gw[(o * c_in + c) * k + q] +=
                                        grow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *signal, |gx| {
                    for o in 0..c_out {
                        for i in 0..len {
                            let grow = &g[(o * len + i) * m..(o * len + i + 1) * m];
                            for c in 0..c_in {
                                for q in 0..k {
                                    let Some(si) = taps(i, q) else { continue };
                                    let wv = w[(o * c_in + c) * k + q];
                                    let dst = &mut gx[(c * len + si) * m..(c * len + si + 1) * m];
                                    for (d, v) in dst.iter_mut().zip(grow) {
                                        *d += wv * v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    /// Central finite-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
            assert!(rel < tol, "{x} vs {y} (rel {rel})");
        }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let eye = g.constant(m(2, 2, &[1., 0., 0., 1.]));
        let v = g.constant(m(2, 1, &[3., 4.]));
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out).data(), &[3., 4.]);

        let a = g.constant(m(2, 2, &[1., 2., 3., 4.]));
        let b = g.constant(m(2, 1, &[5., 6.]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transposed() {
        let a0 = m(2, 3, &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]);
        let b0 = m(3, 2, &[1.0, -2.0, 0.4, 0.9, -0.3, 1.5]);
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let prod = g.matmul(a, b).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let analytic = g.grad(a).unwrap();
        // ones(2x2) . b^T: row sums of b
        let expected: Vec<f64> = (0..2)
            .flat_map(|_| (0..3).map(|l| b0.at(l, 0) + b0.at(l, 1)))
            .collect();
        assert_close(analytic.data(), &expected, 1e-12);
        let fd = numeric_grad(&a0, |x| {
            let mut g = Graph::new();
            let a = g.constant(x.clone());
            let b = g.constant(b0.clone());
            let p = g.matmul(a, b).unwrap();
            let s = g.sum(p);
            g.value(s).data()[0]
        });
        assert_close(analytic.data(), &fd, 1e-6);
    }

    #[test]
    fn unary_values_and_sigmoid_slope() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, -3.0]));
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(t).data()[0], 0.0);
        assert_eq!(g.value(r).data()[1], 0.0);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        let fd = (sigmoid(1e-5) - sigmoid(-1e-5)) / 2e-5;
        assert!((g.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-12);
        assert!((fd - 0.25).abs() < 1e-9);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_identity_kernel_and_even_kernel_padding() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 3, &[1., 2., 3.]));
        let k1 = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let out = g.conv1d_same(x, k1, b).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3.]);

        let k2 = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let out = g.conv1d_same(x, k2, b).unwrap();
        assert_eq!(g.value(out).data(), &[3., 5., 3.]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 2, &[1., 2.]));
        let k = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0; 3]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.conv1d_same(x, k, b), Err(Error::Config(_))));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x0 = Tensor::new(
            vec![2, 5, 3],
            (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
        )
        .unwrap();
        let w0 = Tensor::new(
            vec![3, 2, 4],
            (0..24).map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0).collect(),
        )
        .unwrap();
        let b0 = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let weights = Tensor::new(
            vec![3, 5, 3],
            (0..45).map(|i| ((i * 3 % 7) as f64 - 3.0) / 2.0).collect(),
        )
        .unwrap();
        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let c = g.conv1d_same(xv, wv, bv).unwrap();
            let r = g.constant(weights.clone());
            let p = g.mul(c, r).unwrap();
            let l = g.sum(p);
            (g, xv, wv, bv, l)
        };
        let (mut g, xv, wv, bv, l) = eval(&x0, &w0, &b0);
        g.backward(l).unwrap();
        let f = |g: &Graph, l: Var| g.value(l).data()[0];
        let fx = numeric_grad(&x0, |x| {
            let (g, .., l) = eval(x, &w0, &b0);
            f(&g, l)
        });
        let fw = numeric_grad(&w0, |w| {
            let (g, .., l) = eval(&x0, w, &b0);
            f(&g, l)
        });
        let fb = numeric_grad(&b0, |b| {
            let (g, .., l) = eval(&x0, &w0, b);
            f(&g, l)
        });
        assert_close(g.grad(xv).unwrap().data(), &fx, 1e-6);
        assert_close(g.grad(wv).unwrap().data(), &fw, 1e-6);
        assert_close(g.grad(bv).unwrap().data(), &fb, 1e-6);
    }

    #[test]
    fn concat_and_slice_shapes_and_adjoints() {
        let mut g = Graph::new();
        let a = g.param(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let b = g.param(m(2, 3, &[7., 8., 9., 10., 11., 12.]));
        let same = g.concat(&[a], 0).unwrap();
        assert_eq!(g.value(same), g.value(a));
        let rows = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(rows), &[4, 3]);
        let cols = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cols), &[2, 6]);
        assert_eq!(
            g.value(cols).data(),
            &[1., 2., 3., 7., 8., 9., 4., 5., 6., 10., 11., 12.]
        );
        let s = g.slice(cols, 1, 2, 2).unwrap();
        assert_eq!(g.value(s).data(), &[3., 7., 6., 10.]);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0., 0., 1., 0., 0., 1.]);
        assert_eq!(g.grad(b).unwrap().data(), &[1., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn concat_rejects_incompatible_extents() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.concat(&[a, b], 1).is_err());
        assert!(g.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn identity_and_square_losses() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.5));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let y = g.scale(x, 4.0);
        let loss = g.mean(y);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0]));
        let x = g.param(Tensor::vector(vec![2.0]));
        let p = g.mul(c, x).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }
}
