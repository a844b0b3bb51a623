//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations are methods
//! on the tape and return [`Var`] handles; values are read back with
//! [`Tape::value`]. There is no broadcasting: elementwise operations demand
//! identical shapes, and the few row-wise operations the model needs
//! ([`Tape::add_bias`]) are explicit.
//!
//! Parameters enter the tape through [`Tape::param`], keyed by an integer
//! chosen by the owner of the parameter storage. After [`Tape::backward`],
//! each leaf holds its accumulated gradient, which the owner can drain with
//! [`Tape::take_grad`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len(), cols]` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row width of a 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse(Var, Var),
    GaussianSample { mu: Var, sigma2: Var, eps: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable leaf under `key`. Repeated calls with the same key
    /// return the same handle, so a parameter used twice accumulates into one
    /// gradient.
    pub fn param(&mut self, key: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(key, v);
        v
    }

    /// Parameter keys registered on this tape with their leaf handles.
    pub fn param_leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Resets every leaf gradient held by the tape.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: self.shape(a).to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let out = Tensor {
            shape: vec![c, r],
            data: transpose_raw(self.data(a), r, c),
        };
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Adds the vector `bias` (`[n]`) to every row of `x` (`[batch, n]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let out = Tensor {
            shape: sx.to_vec(),
            data,
        };
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Domain {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                len: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor { shape, data };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Index {
                op: "slice",
                index: axis,
                len: s.len(),
            });
        }
        if range.start > range.end || range.end > s[axis] {
            return Err(Error::Index {
                op: "slice",
                index: range.end,
                len: s[axis],
            });
        }
        let (outer, inner) = outer_inner(&s, axis);
        let width = range.end - range.start;
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&src[base + range.start * inner..base + range.end * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let out = Tensor { shape, data };
        Ok(self.push(
            out,
            Op::Slice {
                input: a,
                axis,
                start: range.start,
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.data(a).iter().sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let out = Tensor::scalar(self.data(a).iter().sum::<f64>() / n);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, softplus_scalar);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let out = self.map(a, f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    /// Returns a leaf holding the same values with no path back to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    ///
    /// `logits` is `[K]` (one label) or `[batch, K]` (one label per row).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (batch, k) = match s.as_slice() {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            _ => return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()])),
        };
        if k < 2 {
            return Err(Error::Domain {
                op: "softmax_cross_entropy",
                msg: format!("need at least 2 classes, got {k}"),
            });
        }
        if labels.len() != batch {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    index: label,
                    len: k,
                });
            }
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[r * k + j] = (v - max).exp() / denom;
            }
            loss += log_denom - (row[label] - max);
        }
        let out = Tensor::scalar(loss / batch as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.data(a).len().max(1) as f64;
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(total / n);
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    /// Reparameterised draw `mu + sqrt(sigma2) * eps` with `eps ~ N(0, I)`.
    pub fn gaussian_sample<R: Rng + ?Sized>(
        &mut self,
        mu: Var,
        sigma2: Var,
        rng: &mut R,
    ) -> Result<Var> {
        self.same_shape("gaussian_sample", mu, sigma2)?;
        if let Some(&bad) = self.data(sigma2).iter().find(|&&s| s < 0.0 || s.is_nan()) {
            return Err(Error::Domain {
                op: "gaussian_sample",
                msg: format!("negative variance {bad}"),
            });
        }
        let eps: Vec<f64> = (0..self.data(mu).len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let data = self
            .data(mu)
            .iter()
            .zip(self.data(sigma2))
            .zip(&eps)
            .map(|((&m, &s), &e)| if s == 0.0 { m } else { m + s.sqrt() * e })
            .collect();
        let out = Tensor {
            shape: self.shape(mu).to_vec(),
            data,
        };
        Ok(self.push(out, Op::GaussianSample { mu, sigma2, eps }, &[mu, sigma2]))
    }

    /// Propagates `d loss / d leaf` into every leaf that requires a gradient.
    /// Gradients are added to whatever the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let node = &self.nodes[i];
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let data = |v: Var| self.nodes[v.0].value.data();
            let shape = |v: Var| self.nodes[v.0].value.shape();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if rg(b) {
                        accumulate(&mut grads, b, g.iter().map(|x| -x).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if rg(a) {
                        let c = g.iter().zip(data(b)).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, a, c);
                    }
                    if rg(b) {
                        let c = g.iter().zip(data(a)).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, b, c);
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (shape(a)[0], shape(a)[1]);
                    let n = shape(b)[1];
                    if rg(a) {
                        let bt = transpose_raw(data(b), k, n);
                        accumulate(&mut grads, a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if rg(b) {
                        let at = transpose_raw(data(a), m, k);
                        accumulate(&mut grads, b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (r, c) = (shape(a)[0], shape(a)[1]);
                    accumulate(&mut grads, a, transpose_raw(&g, c, r));
                }
                Op::AddBias(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let n = shape(bias)[0];
                    if rg(bias) {
                        let mut gb = vec![0.0; n];
                        for (j, v) in g.iter().enumerate() {
                            gb[j % n] += v;
                        }
                        accumulate(&mut grads, bias, gb);
                    }
                    if rg(x) {
                        accumulate(&mut grads, x, g);
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let a = *a;
                    accumulate(&mut grads, a, g);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, a, g.iter().map(|x| x * c).collect());
                }
                Op::Concat { inputs, axis } => {
                    let inputs = inputs.clone();
                    let axis = *axis;
                    let base = shape(inputs[0]).to_vec();
                    let (outer, inner) = outer_inner(&base, axis);
                    let total: usize = node.value.shape()[axis];
                    let mut offset = 0;
                    let mut parts = Vec::with_capacity(inputs.len());
                    for &v in &inputs {
                        let width = shape(v)[axis];
                        let mut part = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&g[start..start + width * inner]);
                        }
                        offset += width;
                        parts.push((v, part));
                    }
                    for (v, part) in parts {
                        if self.nodes[v.0].requires_grad {
                            accumulate(&mut grads, v, part);
                        }
                    }
                }
                Op::Slice { input, axis, start } => {
                    let (input, axis, start) = (*input, *axis, *start);
                    let s = shape(input).to_vec();
                    let width = node.value.shape()[axis];
                    let (outer, inner) = outer_inner(&s, axis);
                    let mut full = vec![0.0; s.iter().product()];
                    for o in 0..outer {
                        let dst = (o * s[axis] + start) * inner;
                        let src = o * width * inner;
                        full[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                    }
                    accumulate(&mut grads, input, full);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let n = data(a).len();
                    accumulate(&mut grads, a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = data(a).len();
                    accumulate(&mut grads, a, vec![g[0] / n.max(1) as f64; n]);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let c = g
                        .iter()
                        .zip(data(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, c);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let c = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, a, c);
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let c = g
                        .iter()
                        .zip(data(a))
                        .map(|(g, &x)| g * sigmoid(x))
                        .collect();
                    accumulate(&mut grads, a, c);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let c = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, a, c);
                }
                Op::Log(a) => {
                    let a = *a;
                    let c = g.iter().zip(data(a)).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads, a, c);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let batch = labels.len();
                    let k = probs.len() / batch;
                    let scale = g[0] / batch as f64;
                    let mut c: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        c[r * k + label] -= scale;
                    }
                    accumulate(&mut grads, logits, c);
                }
                Op::Mse(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = data(a).len().max(1) as f64;
                    let diff: Vec<f64> = data(a)
                        .iter()
                        .zip(data(b))
                        .map(|(x, y)| 2.0 * g[0] * (x - y) / n)
                        .collect();
                    if rg(b) {
                        accumulate(&mut grads, b, diff.iter().map(|d| -d).collect());
                    }
                    if rg(a) {
                        accumulate(&mut grads, a, diff);
                    }
                }
                Op::GaussianSample { mu, sigma2, eps } => {
                    let (mu, sigma2) = (*mu, *sigma2);
                    if rg(sigma2) {
                        let c = g
                            .iter()
                            .zip(data(sigma2))
                            .zip(eps)
                            .map(|((g, &s), e)| if s > 0.0 { g * e / (2.0 * s.sqrt()) } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, sigma2, c);
                    }
                    if rg(mu) {
                        accumulate(&mut grads, mu, g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sum of absolute elementwise differences, evaluated off the tape.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1_distance", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::eye(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.softplus(x);
        assert!((tape.value(y).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul(a, b).is_ok());
    }

    #[test]
    fn detach_blocks_gradient_entirely() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
        let d = tape.detach(x);
        let sq = tape.mul(d, d).unwrap();
        let y = tape.sum(sq);
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(!tape.requires_grad(d));
    }

    #[test]
    fn only_undetached_path_contributes() {
        let mut tape = Tape::new();
        let xs = vec![1.5, -2.0, 0.25];
        let x = tape.leaf(Tensor::vector(xs.clone()), true);
        let sq = tape.mul(x, x).unwrap();
        let d = tape.detach(x);
        let dsq = tape.mul(d, d).unwrap();
        let s = tape.add(sq, dsq).unwrap();
        let y = tape.sum(s);
        tape.backward(y).unwrap();
        let expected: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        for k in [2usize, 6] {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::full(&[k], 0.3));
            let ce = tape.softmax_cross_entropy(l, &[1]).unwrap();
            assert!((tape.value(ce).item() - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for label in 0..4 {
            let logits = rand_tensor(&mut rng, &[4]);
            let naive = {
                let e: Vec<f64> = logits.data().iter().map(|v| v.exp()).collect();
                -(e[label] / e.iter().sum::<f64>()).ln()
            };
            let mut tape = Tape::new();
            let l = tape.constant(logits);
            let ce = tape.softmax_cross_entropy(l, &[label]).unwrap();
            assert!((tape.value(ce).item() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[3]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn mse_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        let e = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(e).item(), 1.0);
        let z = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4]));
        let mut acc = 0.0;
        for i in 0..12 {
            let d = x.data()[i] - y.data()[i];
            acc += d * d;
        }
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let m = tape.mse(xv, yv).unwrap();
        assert!((tape.value(m).item() - acc / 12.0).abs() < 1e-12);
    }

    #[test]
    fn l1_distance_cases() {
        let a = Tensor::vector(vec![2.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (rand_tensor(&mut rng, &[10]), rand_tensor(&mut rng, &[10]));
        let mut acc = 0.0;
        for i in 0..10 {
            acc += (x.data()[i] - y.data()[i]).abs();
        }
        assert_eq!(l1_distance(&x, &y).unwrap(), acc);
        assert!(l1_distance(&x, &Tensor::zeros(&[9])).is_err());
    }

    #[test]
    fn gaussian_sample_degenerate_and_linear_in_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]), true);
        let zero = tape.constant(Tensor::zeros(&[3]));
        let z = tape.gaussian_sample(mu, zero, &mut rng).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(mu).data());

        let one = tape.leaf(Tensor::full(&[3], 1.0), true);
        let z = tape.gaussian_sample(mu, one, &mut rng).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(mu).unwrap(), &[1.0, 1.0, 1.0]);

        let neg = tape.constant(Tensor::full(&[3], -0.1));
        assert!(matches!(
            tape.gaussian_sample(mu, neg, &mut rng),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn gaussian_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[n]));
        let s2 = tape.constant(Tensor::full(&[n], 1.0));
        let z = tape.gaussian_sample(mu, s2, &mut rng).unwrap();
        let d = tape.value(z).data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn backward_sum_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap(), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 1..3).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let r = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.value(r).shape(), &[4, 2]);
        let t = tape.sum(s);
        tape.backward(t).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn constant_inputs_record_no_backward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b));
    }
}
