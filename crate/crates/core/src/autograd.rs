//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape from the loss node down to index 0, visiting each node once
//! and accumulating adjoints into its inputs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_matmul, gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Rows whose norm falls below this are rejected by [`Graph::l2_normalize_rows`].
pub const DEGENERATE_NORM: f64 = 1e-8;
/// Floor applied to the normalization denominator.
pub const NORM_EPS: f64 = 1e-12;
/// Probability clamp used by binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    L2,
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Adjoints for each input, in the order the inputs were registered.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Bce { p: Var, targets: Vec<T>, mask: Vec<bool>, count: usize },
    ChannelMean { x: Var, spatial: usize },
    ChannelScale { x: Var, s: Var, channels: usize, spatial: usize },
    ConcatRows(Vec<Var>),
    CrossDistance { x: Var, y: Var, metric: Metric },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape. Not shareable across threads.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    kink: f64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn unbroadcast<T: Real>(g: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if target.numel() == g.numel() {
        g.clone().reshape(target.shape()).expect("same numel")
    } else {
        let s: T = g.data().iter().copied().sum();
        Tensor::full(target.shape(), s)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Smallest distance to a point of non-differentiability seen so far
    /// (relu inputs, active-set boundaries of hinges and argmins).
    pub fn kink_distance(&self) -> f64 {
        self.kink
    }

    pub fn note_kink(&mut self, distance: f64) {
        if distance < self.kink {
            self.kink = distance;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an externally computed output with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: impl CustomOp<T> + 'static) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op: Box::new(op),
            },
            inputs,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Shape(format!(
                "{what}: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.numel() != tx.shape()[1] {
            return Err(Error::Shape(format!(
                "row bias {:?} does not match {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let n = tx.shape()[1];
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + tb.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let kink = t.data().iter().map(|v| v.as_f64().abs()).fold(f64::INFINITY, f64::min);
        let out = t.map(|v| if v > T::zero() { v } else { T::zero() });
        self.note_kink(kink);
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let out = Tensor::scalar(s / T::from_usize(t.numel()).unwrap());
        self.push(out, Op::Mean(x), &[x])
    }

    /// Divides each row (or a single vector) by its L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = if t.rank() == 1 { (1, t.numel()) } else { t.dims2() };
        let eps = T::of_f64(NORM_EPS);
        let mut norms = Vec::with_capacity(rows);
        let mut out = t.clone();
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.as_f64() < DEGENERATE_NORM {
                return Err(Error::Degenerate {
                    row: r,
                    norm: n.as_f64(),
                });
            }
            let n = n.max(eps);
            for v in &mut out.data_mut()[r * d..(r + 1) * d] {
                *v = *v / n;
            }
            norms.push(n);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let (b, c) = t.dims2();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            let row = t.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            total = total + (z.ln() + mx - row[labels[i]]);
        }
        let out = Tensor::scalar(total / T::from_usize(b).unwrap());
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Binary cross-entropy averaged over entries where `mask` is true.
    /// Probabilities are clamped into `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[T], mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() {
            return Err(Error::Shape(format!(
                "probabilities {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        if targets.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::InvalidArgument("binary targets must be 0 or 1".into()));
        }
        let mask = match mask {
            Some(m) if m.len() != targets.len() => {
                return Err(Error::Shape("mask length differs from targets".into()))
            }
            Some(m) => m.to_vec(),
            None => vec![true; targets.len()],
        };
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArgument("empty BCE mask".into()));
        }
        let lo = T::of_f64(PROB_CLAMP);
        let hi = T::one() - lo;
        let mut total = T::zero();
        for ((&pv, &y), &m) in t.data().iter().zip(targets).zip(&mask) {
            if !m {
                continue;
            }
            let pc = pv.max(lo).min(hi);
            total = total - (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        }
        let out = Tensor::scalar(total / T::from_usize(count).unwrap());
        Ok(self.push(
            out,
            Op::Bce {
                p,
                targets: targets.to_vec(),
                mask,
                count,
            },
            &[p],
        ))
    }

    /// `[b, C, S] -> [b, C]` average over the trailing spatial axis.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::Shape(format!("channel_mean needs [b, C, S], got {:?}", t.shape())));
        }
        let (b, channels, spatial) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let inv = T::one() / T::from_usize(spatial).unwrap();
        let mut out = vec![T::zero(); b * channels];
        for (o, chunk) in out.iter_mut().zip(t.data().chunks(spatial)) {
            *o = chunk.iter().copied().sum::<T>() * inv;
        }
        let out = Tensor::new(vec![b, channels], out)?;
        Ok(self.push(out, Op::ChannelMean { x, spatial }, &[x]))
    }

    /// `x[b, C, S] * s[b, C]` broadcast over the spatial axis.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 3 || ts.shape() != &tx.shape()[..2] {
            return Err(Error::Shape(format!(
                "channel_scale: {:?} vs gates {:?}",
                tx.shape(),
                ts.shape()
            )));
        }
        let (channels, spatial) = (tx.shape()[1], tx.shape()[2]);
        let mut out = tx.clone();
        for (chunk, &g) in out.data_mut().chunks_mut(spatial).zip(ts.data()) {
            for v in chunk {
                *v = *v * g;
            }
        }
        Ok(self.push(out, Op::ChannelScale { x, s, channels, spatial }, &[x, s]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            same_shape(&t.shape()[1..], &tail, "concat_rows")?;
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// All-pairs distance matrix between rows of `x[m, d]` and `y[n, d]`.
    /// Cosine distance is `1 - x.y`, which assumes unit-norm inputs.
    pub fn cross_distance(&mut self, x: Var, y: Var, metric: Metric) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.rank() != 2 || ty.rank() != 2 || tx.shape()[1] != ty.shape()[1] {
            return Err(Error::Shape(format!(
                "distance dimension mismatch: {:?} vs {:?}",
                tx.shape(),
                ty.shape()
            )));
        }
        let (m, d) = tx.dims2();
        let n = ty.shape()[0];
        let mut out = vec![T::zero(); m * n];
        match metric {
            Metric::Cosine => {
                gemm_nt(tx.data(), ty.data(), &mut out, m, d, n);
                for v in &mut out {
                    *v = T::one() - *v;
                }
            }
            Metric::L2 => {
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = tx
                            .row(i)
                            .iter()
                            .zip(ty.row(j))
                            .map(|(&a, &b)| (a - b) * (a - b))
                            .sum::<T>()
                            .sqrt();
                    }
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::CrossDistance { x, y, metric }, &[x, y]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, adj) in self.adjoints(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&adj),
                    slot @ None => *slot = Some(adj),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn adjoints(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = check_matmul(ta.shape(), tb.shape()).expect("checked in forward");
                let mut da = vec![T::zero(); m * k];
                gemm_nt(g.data(), tb.data(), &mut da, m, n, k);
                let mut db = vec![T::zero(); k * n];
                gemm_tn(ta.data(), g.data(), &mut db, k, m, n);
                vec![
                    (*a, Tensor::new(vec![m, k], da).unwrap()),
                    (*b, Tensor::new(vec![k, n], db).unwrap()),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose2().unwrap())],
            Op::Add(a, b) => vec![(*a, unbroadcast(g, val(*a))), (*b, unbroadcast(g, val(*b)))],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(g, val(*a))),
                (*b, unbroadcast(&g.map(|v| -v), val(*b))),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.item() } else { t.data()[i] };
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * pick(tb, i));
                let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * pick(ta, i));
                vec![(*a, unbroadcast(&ga, ta)), (*b, unbroadcast(&gb, tb))]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|v| v * *k))],
            Op::AddRow(x, b) => {
                let n = val(*b).numel();
                let mut db = vec![T::zero(); n];
                for (i, &v) in g.data().iter().enumerate() {
                    db[i % n] = db[i % n] + v;
                }
                let db = Tensor::new(val(*b).shape().to_vec(), db).unwrap();
                vec![(*x, g.clone()), (*b, db)]
            }
            Op::Relu(x) => {
                let tx = val(*x);
                let dx = Tensor::from_fn(g.shape(), |i| {
                    if tx.data()[i] > T::zero() {
                        g.data()[i]
                    } else {
                        T::zero()
                    }
                });
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = Tensor::from_fn(g.shape(), |i| {
                    let s = y.data()[i];
                    g.data()[i] * s * (T::one() - s)
                });
                vec![(*x, dx)]
            }
            Op::Tanh(x) => {
                let dx = Tensor::from_fn(g.shape(), |i| {
                    let t = y.data()[i];
                    g.data()[i] * (T::one() - t * t)
                });
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape()).unwrap())],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let t = val(*x);
                let k = g.item() / T::from_usize(t.numel()).unwrap();
                vec![(*x, Tensor::full(t.shape(), k))]
            }
            Op::L2Normalize { x, norms } => {
                let d = y.numel() / norms.len();
                let mut dx = g.clone();
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (j, v) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().enumerate() {
                        *v = (gr[j] - yr[j] * dot) / n;
                    }
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let k = g.item() / T::from_usize(b).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = d[i * c + l] - T::one();
                }
                for v in &mut d {
                    *v = *v * k;
                }
                vec![(*logits, Tensor::new(val(*logits).shape().to_vec(), d).unwrap())]
            }
            Op::Bce { p, targets, mask, count } => {
                let tp = val(*p);
                let lo = T::of_f64(PROB_CLAMP);
                let hi = T::one() - lo;
                let k = g.item() / T::from_usize(*count).unwrap();
                let d = Tensor::from_fn(tp.shape(), |i| {
                    let pv = tp.data()[i];
                    if !mask[i] || pv < lo || pv > hi {
                        return T::zero();
                    }
                    let yv = targets[i];
                    k * (-(yv / pv) + (T::one() - yv) / (T::one() - pv))
                });
                vec![(*p, d)]
            }
            Op::ChannelMean { x, spatial } => {
                let inv = T::one() / T::from_usize(*spatial).unwrap();
                let t = val(*x);
                let dx = Tensor::from_fn(t.shape(), |i| g.data()[i / spatial] * inv);
                vec![(*x, dx)]
            }
            Op::ChannelScale { x, s, channels, spatial } => {
                let (tx, ts) = (val(*x), val(*s));
                let dx = Tensor::from_fn(tx.shape(), |i| g.data()[i] * ts.data()[i / spatial]);
                let b = tx.shape()[0];
                let mut ds = vec![T::zero(); b * channels];
                for (k, slot) in ds.iter_mut().enumerate() {
                    let span = k * spatial..(k + 1) * spatial;
                    *slot = g.data()[span.clone()]
                        .iter()
                        .zip(&tx.data()[span])
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
                vec![(*x, dx), (*s, Tensor::new(ts.shape().to_vec(), ds).unwrap())]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).numel();
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        (p, Tensor::new(val(p).shape().to_vec(), piece).unwrap())
                    })
                    .collect()
            }
            Op::CrossDistance { x, y: yv, metric } => {
                let (tx, ty) = (val(*x), val(*yv));
                let (m, d) = tx.dims2();
                let n = ty.shape()[0];
                let mut dx = vec![T::zero(); m * d];
                let mut dy = vec![T::zero(); n * d];
                match metric {
                    Metric::Cosine => {
                        let neg = g.map(|v| -v);
                        gemm_nn(neg.data(), ty.data(), &mut dx, m, n, d);
                        gemm_tn(neg.data(), tx.data(), &mut dy, n, m, d);
                    }
                    Metric::L2 => {
                        for i in 0..m {
                            for j in 0..n {
                                let dist = y.data()[i * n + j];
                                let gij = g.data()[i * n + j];
                                if dist == T::zero() || gij == T::zero() {
                                    continue;
                                }
                                let k = gij / dist;
                                for c in 0..d {
                                    let diff = tx.data()[i * d + c] - ty.data()[j * d + c];
                                    dx[i * d + c] = dx[i * d + c] + k * diff;
                                    dy[j * d + c] = dy[j * d + c] - k * diff;
                                }
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(vec![m, d], dx).unwrap()),
                    (*yv, Tensor::new(vec![n, d], dy).unwrap()),
                ]
            }
            Op::Custom { inputs, op } => {
                let tins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let adj = op.backward(&tins, y, g);
                debug_assert_eq!(adj.len(), inputs.len(), "{} adjoint count", op.name());
                inputs
                    .iter()
                    .zip(adj)
                    .filter_map(|(&v, a)| a.map(|a| (v, a)))
                    .collect()
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[0.0, -3.0, 3.0]));
        let s = g.sigmoid(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(&g.value(r).data()[1..], &[0.0, 3.0]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[0.0]));
        let s = g.sigmoid(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = g.param(t(&[2], &[0.6, 0.8]));
        let yu = g.l2_normalize_rows(u).unwrap();
        assert!((g.value(yu).data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_tiny_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[1e-9, 0.0]));
        assert!(matches!(g.l2_normalize_rows(x), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::zeros(&[2, 4]));
        let l = g.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let z = g.param(t(&[1, 3], &[100.0, 0.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-30);
        assert!(g.softmax_cross_entropy(z, &[3]).is_err());
    }

    #[test]
    fn bce_values_and_errors() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(&[4], 0.5));
        let l = g.binary_cross_entropy(p, &[0.0, 1.0, 1.0, 0.0], None).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let p = g.param(t(&[2], &[1.0, 0.0]));
        let l = g.binary_cross_entropy(p, &[1.0, 0.0], None).unwrap();
        assert!(g.value(l).item() < 1e-6);
        assert!(g.binary_cross_entropy(p, &[0.5, 0.0], None).is_err());
        assert!(g.binary_cross_entropy(p, &[1.0, 0.0], Some(&[false, false])).is_err());
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(2.0));
        assert!(g.mul(a, s).is_ok());
    }

    #[test]
    fn reused_tensor_accumulates() {
        // x*x + x  versus the rewrite x^2 + x: d/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
