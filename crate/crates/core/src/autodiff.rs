//! Reverse-mode automatic differentiation over [`FloatTensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! the ids of its inputs. Inputs always precede the node that consumes them,
//! so [`Tape::backward`] is a single reverse sweep. Only nodes that depend on
//! a `requires_grad` leaf take part in the sweep.
//!
//! The quantization nodes [`Tape::ste_round`] and [`Tape::ste_clamp`] use
//! straight-through rules: round passes the upstream gradient unchanged and
//! clamp multiplies it by a 0/1 mask of the closed interval `[lo, hi]`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{FloatTensor, Shape};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How a scale vector is broadcast against a matrix in [`Tape::mul_broadcast`]
/// and [`Tape::div_broadcast`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// A single value for the whole matrix.
    Scalar,
    /// One value per row (length M).
    Rows,
    /// One value per column (length K).
    Columns,
}

impl Broadcast {
    fn expected_len(self, rows: usize, cols: usize) -> usize {
        match self {
            Broadcast::Scalar => 1,
            Broadcast::Rows => rows,
            Broadcast::Columns => cols,
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize) -> usize {
        match self {
            Broadcast::Scalar => 0,
            Broadcast::Rows => r,
            Broadcast::Columns => c,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    MulBroadcast(Var, Var, Broadcast),
    DivBroadcast(Var, Var, Broadcast),
    AddBias(Var, Var),
    SteRound(Var),
    SteClamp { input: Var, lo: f32, hi: f32 },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<u32> },
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: FloatTensor },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    batch: usize,
    seq: usize,
    /// `[batch][head][i][j]`
    probs: Vec<f32>,
}

#[derive(Debug)]
struct Node {
    value: FloatTensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss, keyed by the leaf they belong to.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, FloatTensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&FloatTensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<FloatTensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    pub fn value(&self, v: Var) -> &FloatTensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: FloatTensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: FloatTensor, requires_grad: bool) -> Result<Var> {
        self.check_open()?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: FloatTensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).div(self.value(b))?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).add_scalar(s);
        Ok(self.push(out, Op::AddScalar(a), &[a]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).mul_scalar(s);
        Ok(self.push(out, Op::MulScalar(a, s), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).exp();
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).ln()?;
        Ok(self.push(out, Op::Ln(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let out = FloatTensor::scalar(self.value(a).sum());
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let x = self.value(a);
        let out = FloatTensor::scalar(x.sum() / x.numel() as f32);
        Ok(self.push(out, Op::Mean(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn check_broadcast(&self, x: Var, s: Var, how: Broadcast, op: &'static str) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(x).matrix_dims(op)?;
        let sv = self.value(s);
        if sv.numel() != how.expected_len(rows, cols) || sv.shape().rank() != 1 {
            return Err(Error::shape(op, self.value(x).dims(), sv.dims()));
        }
        Ok((rows, cols))
    }

    /// `x[r, c] * s[broadcast index]`.
    pub fn mul_broadcast(&mut self, x: Var, s: Var, how: Broadcast) -> Result<Var> {
        self.check_open()?;
        let (rows, cols) = self.check_broadcast(x, s, how, "mul_broadcast")?;
        let out = broadcast_apply(self.value(x), self.value(s).data(), rows, cols, how, |a, b| a * b)?;
        Ok(self.push(out, Op::MulBroadcast(x, s, how), &[x, s]))
    }

    /// `x[r, c] / s[broadcast index]`.
    pub fn div_broadcast(&mut self, x: Var, s: Var, how: Broadcast) -> Result<Var> {
        self.check_open()?;
        let (rows, cols) = self.check_broadcast(x, s, how, "div_broadcast")?;
        let out = broadcast_apply(self.value(x), self.value(s).data(), rows, cols, how, |a, b| a / b)?;
        Ok(self.push(out, Op::DivBroadcast(x, s, how), &[x, s]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let out = nn::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Round half away from zero; the backward pass is the identity.
    pub fn ste_round(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).map(f32::round);
        Ok(self.push(out, Op::SteRound(a), &[a]))
    }

    /// Clamp to `[lo, hi]`; the backward pass keeps the gradient where the
    /// input lies in the closed interval and zeroes it elsewhere.
    pub fn ste_clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        self.check_open()?;
        if !(lo < hi) {
            return Err(Error::invalid(format!("ste_clamp requires lo < hi, got [{lo}, {hi}]")));
        }
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(out, Op::SteClamp { input: a, lo, hi }, &[a]))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        self.check_open()?;
        let (out, inv_rms) = nn::rms_norm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).map(nn::gelu);
        Ok(self.push(out, Op::Gelu(a), &[a]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        self.check_open()?;
        let out = nn::embedding(self.value(table), ids)?;
        let ids = ids.to_vec();
        Ok(self.push(out, Op::Embedding { table, ids }, &[table]))
    }

    /// Causal multi-head self-attention over `batch` independent sequences of
    /// length `seq`, stacked row-wise in `q`, `k`, `v` (each `[batch·seq × d]`).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, batch: usize) -> Result<Var> {
        self.check_open()?;
        let (rows, dim) = self.value(q).matrix_dims("causal_attention")?;
        for other in [k, v] {
            if self.value(other).dims() != self.value(q).dims() {
                return Err(Error::shape("causal_attention", self.value(q).dims(), self.value(other).dims()));
            }
        }
        if batch == 0 || rows % batch != 0 || n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::invalid(format!(
                "causal_attention: {rows} rows, dim {dim} incompatible with batch {batch}, {n_heads} heads"
            )));
        }
        let seq = rows / batch;
        let mut out = vec![0.0f32; rows * dim];
        let mut probs = vec![0.0f32; batch * n_heads * seq * seq];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            let r = b * seq * dim..(b + 1) * seq * dim;
            let p = b * n_heads * seq * seq..(b + 1) * n_heads * seq * seq;
            nn::causal_attention(
                &qd[r.clone()],
                &kd[r.clone()],
                &vd[r.clone()],
                seq,
                seq,
                dim,
                n_heads,
                0,
                &mut out[r],
                Some(&mut probs[p]),
            );
        }
        let out = FloatTensor::from_vec(Shape::matrix(rows, dim)?, out)?;
        let saved = AttentionSaved {
            q,
            k,
            v,
            n_heads,
            batch,
            seq,
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        self.check_open()?;
        let (loss, probs) = nn::cross_entropy(self.value(logits), targets)?;
        let targets = targets.to_vec();
        Ok(self.push(
            FloatTensor::scalar(loss),
            Op::CrossEntropy { logits, targets, probs },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of intermediate nodes are
    /// dropped once propagated; the result holds every `requires_grad` leaf
    /// the loss depends on. Fan-out contributions are summed in reverse
    /// node-id order.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_open()?;
        let shape = self.value(loss).shape().clone();
        if shape.numel() != 1 {
            return Err(Error::NotScalar(shape.dims().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<FloatTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(FloatTensor::full(shape, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(id), g);
                continue;
            }
            self.propagate(id, g, &mut grads)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: FloatTensor, grads: &mut [Option<FloatTensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: FloatTensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            accumulate(&mut grads[v.0], t)
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    send(*b, g.clone())?;
                }
                send(*a, g)?;
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    send(*b, g.mul_scalar(-1.0))?;
                }
                send(*a, g)?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.mul(val(*b))?)?;
                }
                if self.wants(*b) {
                    send(*b, g.mul(val(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.wants(*a) {
                    send(*a, g.div(bv)?)?;
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.mul(&node.value)?.div(bv)?.mul_scalar(-1.0);
                    send(*b, t)?;
                }
            }
            Op::AddScalar(a) => send(*a, g)?,
            Op::MulScalar(a, s) => send(*a, g.mul_scalar(*s))?,
            Op::Exp(a) => send(*a, g.mul(&node.value)?)?,
            Op::Ln(a) => send(*a, g.div(val(*a))?)?,
            Op::Sum(a) => {
                let s = g.data()[0];
                send(*a, FloatTensor::full(val(*a).shape().clone(), s))?;
            }
            Op::Mean(a) => {
                let x = val(*a);
                let s = g.data()[0] / x.numel() as f32;
                send(*a, FloatTensor::full(x.shape().clone(), s))?;
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.matmul(&val(*b).transpose()?)?)?;
                }
                if self.wants(*b) {
                    send(*b, val(*a).transpose()?.matmul(&g)?)?;
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()?)?,
            Op::MulBroadcast(x, s, how) => {
                let (rows, cols) = g.matrix_dims("mul_broadcast")?;
                let sv = val(*s).data();
                if self.wants(*x) {
                    send(*x, broadcast_apply(&g, sv, rows, cols, *how, |a, b| a * b)?)?;
                }
                if self.wants(*s) {
                    let xv = val(*x).data();
                    let ds = reduce_broadcast(g.data(), rows, cols, *how, |i| xv[i]);
                    send(*s, FloatTensor::from_vec(val(*s).shape().clone(), ds)?)?;
                }
            }
            Op::DivBroadcast(x, s, how) => {
                let (rows, cols) = g.matrix_dims("div_broadcast")?;
                let sv = val(*s).data();
                let gx = broadcast_apply(&g, sv, rows, cols, *how, |a, b| a / b)?;
                if self.wants(*s) {
                    // d(x/s)/ds = -(x/s)/s; dividing g first keeps g = s exact.
                    let out = node.value.data();
                    let ds = reduce_broadcast(gx.data(), rows, cols, *how, |i| -out[i]);
                    send(*s, FloatTensor::from_vec(val(*s).shape().clone(), ds)?)?;
                }
                if self.wants(*x) {
                    send(*x, gx)?;
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let (_, cols) = g.matrix_dims("add_bias")?;
                    let mut db = vec![0.0f32; cols];
                    for row in g.data().chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, FloatTensor::vector(db)?)?;
                }
                send(*x, g)?;
            }
            Op::SteRound(a) => send(*a, g)?,
            Op::SteClamp { input, lo, hi } => {
                let x = val(*input).data();
                let mut masked = g;
                for (d, &v) in masked.data_mut().iter_mut().zip(x) {
                    if !(*lo <= v && v <= *hi) {
                        *d = 0.0;
                    }
                }
                send(*input, masked)?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let (rows, cols) = xv.matrix_dims("rms_norm")?;
                if self.wants(*gain) {
                    let mut dg = vec![0.0f32; cols];
                    for r in 0..rows {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        for c in 0..cols {
                            dg[c] += gr[c] * xr[c] * inv_rms[r];
                        }
                    }
                    send(*gain, FloatTensor::vector(dg)?)?;
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (xr, gr, ri) = (xv.row(r), g.row(r), inv_rms[r]);
                        let dot = (0..cols).fold(0.0f32, |a, c| a + gr[c] * gv[c] * xr[c]);
                        let coef = ri * ri * ri * dot / cols as f32;
                        dx.extend((0..cols).map(|c| ri * gr[c] * gv[c] - xr[c] * coef));
                    }
                    send(*x, FloatTensor::from_vec(xv.shape().clone(), dx)?)?;
                }
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let mut d = g;
                for (dv, &xv) in d.data_mut().iter_mut().zip(x) {
                    *dv *= nn::gelu_grad(xv);
                }
                send(*a, d)?;
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let (_, dim) = tv.matrix_dims("embedding")?;
                let mut dt = FloatTensor::zeros(tv.shape().clone());
                for (r, &id) in ids.iter().enumerate() {
                    let row = &mut dt.data_mut()[id as usize * dim..(id as usize + 1) * dim];
                    for (d, &v) in row.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                send(*table, dt)?;
            }
            Op::Attention(saved) => {
                let (dq, dk, dv) = attention_backward(saved, val(saved.q), val(saved.k), val(saved.v), &g)?;
                let AttentionSaved { q, k, v, .. } = **saved;
                if self.wants(q) {
                    send(q, dq)?;
                }
                if self.wants(k) {
                    send(k, dk)?;
                }
                if self.wants(v) {
                    send(v, dv)?;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / targets.len() as f32;
                let (_, vocab) = probs.matrix_dims("cross_entropy")?;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.data_mut()[r * vocab + t as usize] -= 1.0;
                }
                for x in d.data_mut() {
                    *x *= scale;
                }
                send(*logits, d)?;
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<FloatTensor>, g: FloatTensor) -> Result<()> {
    match slot {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::shape("accumulate", existing.dims(), g.dims()));
            }
            for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

fn broadcast_apply(
    x: &FloatTensor,
    s: &[f32],
    rows: usize,
    cols: usize,
    how: Broadcast,
    f: impl Fn(f32, f32) -> f32,
) -> Result<FloatTensor> {
    let mut out = Vec::with_capacity(rows * cols);
    let xd = x.data();
    for r in 0..rows {
        for c in 0..cols {
            out.push(f(xd[r * cols + c], s[how.index(r, c)]));
        }
    }
    FloatTensor::from_vec(x.shape().clone(), out)
}

/// `Σ g[i]·w(i)` over each broadcast slice, accumulated in row-major order.
fn reduce_broadcast(g: &[f32], rows: usize, cols: usize, how: Broadcast, w: impl Fn(usize) -> f32) -> Vec<f32> {
    let mut acc = vec![0.0f32; how.expected_len(rows, cols)];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            acc[how.index(r, c)] += g[i] * w(i);
        }
    }
    acc
}

fn attention_backward(
    s: &AttentionSaved,
    q: &FloatTensor,
    k: &FloatTensor,
    v: &FloatTensor,
    g: &FloatTensor,
) -> Result<(FloatTensor, FloatTensor, FloatTensor)> {
    let (rows, dim) = q.matrix_dims("attention_backward")?;
    let (t, heads) = (s.seq, s.n_heads);
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dq = vec![0.0f32; rows * dim];
    let mut dk = vec![0.0f32; rows * dim];
    let mut dv = vec![0.0f32; rows * dim];
    let mut dp = vec![0.0f32; t];
    for b in 0..s.batch {
        let base = b * t;
        for h in 0..heads {
            let c0 = h * dh;
            let pbase = (b * heads + h) * t * t;
            for i in 0..t {
                let p_row = &s.probs[pbase + i * t..pbase + i * t + i + 1];
                let gi = &gd[(base + i) * dim + c0..(base + i) * dim + c0 + dh];
                // dp_ij = g_i · v_j, dv_j += p_ij g_i
                let mut dot = 0.0f32;
                for (j, &p) in p_row.iter().enumerate() {
                    let vo = (base + j) * dim + c0;
                    let vj = &vd[vo..vo + dh];
                    dp[j] = gi.iter().zip(vj).fold(0.0f32, |a, (&x, &y)| a + x * y);
                    dot += p * dp[j];
                    for (d, &gg) in dv[vo..vo + dh].iter_mut().zip(gi) {
                        *d += p * gg;
                    }
                }
                let qo = (base + i) * dim + c0;
                for (j, &p) in p_row.iter().enumerate() {
                    let ds = p * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = (base + j) * dim + c0;
                    for c in 0..dh {
                        dq[qo + c] += ds * kd[ko + c];
                        dk[ko + c] += ds * qd[qo + c];
                    }
                }
            }
        }
    }
    let shape = q.shape().clone();
    Ok((
        FloatTensor::from_vec(shape.clone(), dq)?,
        FloatTensor::from_vec(shape.clone(), dk)?,
        FloatTensor::from_vec(shape, dv)?,
    ))
}
