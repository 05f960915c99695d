//! Tape-based reverse-mode differentiation covering the layers and losses
//! of the keyword-spotting backbone.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Leaves are
//! pushed with [`Tape::constant`] or [`Tape::parameter`]; each op appends a
//! node that remembers its inputs and whatever it needs for the backward
//! pass. [`Tape::backward`] walks the nodes in reverse, accumulating
//! gradients only into nodes that lead back to a parameter.
//!
//! A tape is single-threaded and short-lived: build it per training step,
//! read the parameter gradients, drop it.

mod adam;
pub mod gradcheck;
mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::ConvGeom;
pub use tensor::{Param, Tensor};

use kernels::{BnStats, ConvGrads, LinearGrads};

use crate::error::{input_err, shape_err, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv1d,
    BatchNorm,
    Relu,
    Add,
    GlobalAvgPool,
    Linear,
    CrossEntropy,
    Mse,
    WeightedSum,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Conv1d,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Add,
        OpKind::GlobalAvgPool,
        OpKind::Linear,
        OpKind::CrossEntropy,
        OpKind::Mse,
        OpKind::WeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv1d => "conv1d",
            OpKind::BatchNorm => "batchnorm1d",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Mse => "mse",
            OpKind::WeightedSum => "weighted_sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm statistics source for [`Tape::batch_norm`].
pub enum Normalization<'a, T> {
    /// Normalize by the current batch (training).
    Batch { eps: f64 },
    /// Normalize by stored running estimates (inference).
    Running { mean: &'a [T], var: &'a [T], eps: f64 },
}

/// Per-channel moments of a training batch, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance.
    pub var_unbiased: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv1d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { input: Var },
    Add { a: Var, b: Var },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { target: Var, current: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Add { .. } => OpKind::Add,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    /// Perturbs the backward pass of one op kind. Used to prove that the
    /// gradient checker notices a broken derivative.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a loss node, widened to `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].as_f64()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Cross-correlation of `input: n × c_in × l` with `weight: c_out × c_in × k`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        x.expect_rank(3, "conv1d input")?;
        w.expect_rank(3, "conv1d weight")?;
        let (n, c_in, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wc_in != c_in {
            return Err(shape_err!("conv1d: input has {c_in} channels, weight expects {wc_in}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv1d: stride must be >= 1"));
        }
        if k == 0 || k > l + 2 * padding {
            return Err(shape_err!("conv1d: kernel {k} longer than padded input {}", l + 2 * padding));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err!("conv1d: bias shape {:?}, expected [{c_out}]", self.value(b).shape()));
            }
        }
        let geom = ConvGeom { batch: n, c_in, len_in: l, c_out, kernel: k, stride, padding };
        let y = kernels::conv1d_forward(&geom, x.data(), w.data(), bias.map(|b| self.value(b).data()));
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, c_out, geom.len_out()], y)?;
        Ok(self.push(value, needs, Op::Conv1d { input, weight, bias, geom }))
    }

    /// Per-channel normalization of `input: n × c × l` followed by `gamma·x̂ + beta`.
    ///
    /// With [`Normalization::Batch`] the returned moments are the batch
    /// statistics the caller folds into its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        norm: Normalization<'_, T>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let x = self.value(input);
        x.expect_rank(3, "batchnorm1d input")?;
        let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err!("batchnorm1d: {name} shape {:?}, expected [{c}]", self.value(v).shape()));
            }
        }
        let (stats, eps) = match norm {
            Normalization::Batch { eps } => {
                if n * l < 2 {
                    return Err(input_err!(
                        "batchnorm1d: training batch needs at least 2 values per channel, got {}",
                        n * l
                    ));
                }
                (BnStats::Batch, eps)
            }
            Normalization::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("batchnorm1d: running stats must have {c} channels"));
                }
                (BnStats::Running { mean, var }, eps)
            }
        };
        let batch_stats = matches!(stats, BnStats::Batch);
        let out = kernels::batchnorm_forward(
            n,
            c,
            l,
            x.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            eps,
        );
        let moments = out.batch_moments.map(|(mean, var)| {
            let m = (n * l) as f64;
            BatchMoments { mean, var_unbiased: var.into_iter().map(|v| v * m / (m - 1.0)).collect() }
        });
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(vec![n, c, l], out.y)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat: out.xhat, inv_std: out.inv_std, batch_stats };
        Ok((self.push(value, needs, op), moments))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, needs, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("add: shapes {:?} and {:?} differ", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    /// Mean over the last (time) axis: `n × c × l → n × c`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(3, "global_avg_pool input")?;
        let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if l == 0 {
            return Err(shape_err!("global_avg_pool: empty time axis"));
        }
        let data = x
            .data()
            .chunks_exact(l)
            .map(|row| T::from_f64_lossy(row.iter().map(|v| v.as_f64()).sum::<f64>() / l as f64))
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::GlobalAvgPool { input }))
    }

    /// `input: n × d`, `weight: m × d`, `bias: m` → `n × m`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        x.expect_rank(2, "linear input")?;
        w.expect_rank(2, "linear weight")?;
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let m = w.shape()[0];
        if w.shape()[1] != d || b.shape() != [m] {
            return Err(shape_err!(
                "linear: input {:?}, weight {:?}, bias {:?} disagree",
                x.shape(),
                w.shape(),
                b.shape()
            ));
        }
        let y = kernels::linear_forward(n, d, m, x.data(), w.data(), b.data());
        let value = Tensor::new(vec![n, m], y)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, needs, Op::Linear { input, weight, bias }))
    }

    /// Batch-mean softmax cross-entropy against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        z.expect_rank(2, "cross_entropy logits")?;
        let (n, c) = (z.shape()[0], z.shape()[1]);
        if labels.len() != n || n == 0 {
            return Err(shape_err!("cross_entropy: {n} logit rows, {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(input_err!("cross_entropy: label {bad} outside [0, {c})"));
        }
        let (loss, probs) = kernels::cross_entropy_forward(c, z.data(), labels);
        let needs = self.needs(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(loss)), needs, op))
    }

    /// Mean over all entries of `(current − target)²`.
    pub fn mse(&mut self, target: Var, current: Var) -> Result<Var> {
        let (t, c) = (self.value(target), self.value(current));
        if t.shape() != c.shape() {
            return Err(shape_err!("mse: shapes {:?} and {:?} differ", t.shape(), c.shape()));
        }
        if t.is_empty() {
            return Err(shape_err!("mse: empty operands"));
        }
        let sum: f64 = t
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| {
                let d = b.as_f64() - a.as_f64();
                d * d
            })
            .sum();
        let loss = sum / t.len() as f64;
        let needs = self.needs(target) || self.needs(current);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(loss)), needs, Op::Mse { target, current }))
    }

    /// `Σ wᵢ·termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(shape_err!("weighted_sum: term has shape {:?}, expected a scalar", t.shape()));
            }
            total += w * t.data()[0].as_f64();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        let op = Op::WeightedSum { terms: terms.to_vec() };
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(total)), needs, op))
    }

    /// Back-propagates from a scalar node, filling `grad` on every node
    /// that depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward: loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if !self.nodes[i].needs_grad {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let mut contributions = self.local_grads(i, &g);
            if self.fault.is_some() && self.fault == self.nodes[i].op.kind() {
                let skew = T::from_f64_lossy(1.01);
                for (_, d) in &mut contributions {
                    d.iter_mut().for_each(|v| *v *= skew);
                }
            }
            self.nodes[i].grad = Some(g);
            for (target, delta) in contributions {
                let node = &mut self.nodes[target.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Gradients of node `i`'s inputs given its upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv1d { input, weight, bias, geom } => {
                let ConvGrads { dx, dw, db } = kernels::conv1d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    self.needs(*input),
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if self.needs(*weight) {
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    out.push((b, db));
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = self.value(*input).shape();
                let grads = kernels::batchnorm_backward(
                    s[0],
                    s[1],
                    s[2],
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    g,
                    *batch_stats,
                    self.needs(*input),
                );
                if let Some(dx) = grads.dx {
                    out.push((*input, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, grads.dgamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, grads.dbeta));
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let dx = x.iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                    out.push((*input, dx));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.needs(*input) {
                    let l = self.value(*input).shape()[2];
                    let inv = T::from_f64_lossy(1.0 / l as f64);
                    let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, l)).collect();
                    out.push((*input, dx));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let LinearGrads { dx, dw, db } =
                    kernels::linear_backward(n, d, m, x.data(), w.data(), g, self.needs(*input));
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if self.needs(*weight) {
                    out.push((*weight, dw));
                }
                if self.needs(*bias) {
                    out.push((*bias, db));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let c = self.value(*logits).shape()[1];
                    let scale = g[0].as_f64() / labels.len() as f64;
                    let mut dz: Vec<T> = probs.iter().map(|p| T::from_f64_lossy(p.as_f64() * scale)).collect();
                    for (row, &y) in labels.iter().enumerate() {
                        dz[row * c + y] = T::from_f64_lossy((probs[row * c + y].as_f64() - 1.0) * scale);
                    }
                    out.push((*logits, dz));
                }
            }
            Op::Mse { target, current } => {
                let t = self.value(*target).data();
                let c = self.value(*current).data();
                let scale = 2.0 * g[0].as_f64() / t.len() as f64;
                let diff: Vec<f64> = c.iter().zip(t).map(|(a, b)| (a.as_f64() - b.as_f64()) * scale).collect();
                if self.needs(*current) {
                    out.push((*current, diff.iter().map(|&d| T::from_f64_lossy(d)).collect()));
                }
                if self.needs(*target) {
                    out.push((*target, diff.iter().map(|&d| T::from_f64_lossy(-d)).collect()));
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        out.push((v, vec![T::from_f64_lossy(w * g[0].as_f64())]));
                    }
                }
            }
        }
        out
    }
}
