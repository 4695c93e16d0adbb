//! Reverse-mode differentiation over a linear op record.
//!
//! Nodes are appended in evaluation order, so the record is already a
//! topological order; `backward` walks it once from the loss down to the
//! first node. Gradients into a node that feeds several consumers are summed.

use std::sync::Arc;

use super::ops::{self, dot, mm_nt_acc, mm_tn_acc};
use super::tensor::{Real, Tensor};
use super::NumError;

/// Additive logit assigned to masked keys. `exp` of it underflows to exactly 0.
pub const MASKED_LOGIT: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention group: every member is a query; members with `key_ok`
/// set are visible as keys, the rest are masked out.
#[derive(Clone, Debug)]
pub struct AttentionGroup {
    pub members: Vec<usize>,
    pub key_ok: Vec<bool>,
}

/// Partition of the rows of a `[cells × d]` matrix into attention groups.
#[derive(Clone, Debug, Default)]
pub struct AttentionLayout {
    pub groups: Vec<AttentionGroup>,
}

struct AttentionRecord<T> {
    q: Var,
    k: Var,
    v: Var,
    sink: Option<(Var, Var)>,
    layout: Arc<AttentionLayout>,
    heads: usize,
    /// Per (group, head): `m × (m + sink)` probabilities, row-major.
    probs: Vec<Vec<T>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    GatherRows(Var, Vec<usize>),
    Attention(Box<AttentionRecord<T>>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one logical step. Not shared across threads.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let out = ops::add_row_bias(self.value(x), self.value(bias))?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu_tensor(self.value(x));
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let vx = self.value(x);
        let axis = vx.shape().len().checked_sub(1).ok_or(NumError::InvalidAxis { axis: 0, rank: 0 })?;
        let out = ops::softmax(vx, axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, NumError> {
        let (out, xhat, inv_std) =
            ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Select rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var, NumError> {
        let out = ops::gather_rows(self.value(x), &rows)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::GatherRows(x, rows), rg))
    }

    /// Multi-head attention within each group of `layout`.
    ///
    /// `q`, `k`, `v` are `[cells × d]`. `sink`, when given, is a learned
    /// `(key, value)` pair of length `d` that every query can attend to in
    /// addition to the group's visible keys. Masked keys receive
    /// [`MASKED_LOGIT`] before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        sink: Option<(Var, Var)>,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<Var, NumError> {
        let sink_vals = sink.map(|(sk, sv)| (self.value(sk), self.value(sv)));
        let (value, probs) = ops::attention(
            self.value(q),
            self.value(k),
            self.value(v),
            sink_vals,
            &layout,
            heads,
            true,
        )?;
        let mut inputs = vec![q, k, v];
        if let Some((sk, sv)) = sink {
            inputs.extend([sk, sv]);
        }
        let rg = self.needs(&inputs);
        let rec = AttentionRecord { q, k, v, sink, layout, heads, probs };
        Ok(self.push(value, Op::Attention(Box::new(rec)), rg))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var, NumError> {
        let vl = self.value(logits);
        let (n, b) = vl.dims2()?;
        if targets.len() != n || n == 0 {
            return Err(NumError::Shape {
                op: "cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), n),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= b) {
            return Err(NumError::Shape {
                op: "cross_entropy",
                detail: format!("target class {} out of {}", bad, b),
            });
        }
        let probs = ops::softmax(vl, 1)?.into_data();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let loss = total / T::from_f64(n as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, rg))
    }

    /// Exact gradients of the scalar `loss` with respect to each of `params`.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>, NumError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        params
            .iter()
            .map(|p| {
                let shape = self.value(*p).shape().to_vec();
                let data = match grads.get(p.0).and_then(|g| g.clone()) {
                    Some(g) => g,
                    None => vec![T::zero(); shape.iter().product()],
                };
                Tensor::new(shape, data)
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![T::zero(); self.nodes[target.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op<T>, value: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = value.shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| mm_nt_acc(g, bd, ga, m, n, k));
                self.accumulate(grads, *b, |gb| mm_tn_acc(ad, g, gb, k, m, n));
            }
            Op::Add(a, b) => {
                for t in [*a, *b] {
                    self.accumulate(grads, t, |gt| {
                        for (x, &y) in gt.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, |gx| {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                let d = self.value(*bias).len();
                self.accumulate(grads, *bias, |gb| {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b * *s;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |gx| {
                    for a in gx.iter_mut() {
                        *a += g0;
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * ops::gelu_grad(xd[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *value.shape().last().expect("rank ≥ 1");
                let y = value.data();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.len() / d {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let inner = dot(ys, gs);
                        for j in 0..d {
                            gx[r * d + j] += ys[j] * (gs[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*gain).len();
                let rows = xhat.len() / d;
                let gd = self.value(*gain).data();
                self.accumulate(grads, *gain, |gg| {
                    for i in 0..xhat.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for i in 0..g.len() {
                        gb[i % d] += g[i];
                    }
                });
                let inv_d = T::from_f64(1.0 / d as f64);
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let base = r * d;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[base + j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = g[base + j] * gd[j];
                            gx[base + j] += inv_std[r] * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                let d = value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let b = self.value(*logits).shape()[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..b {
                            let ind = if j == t { T::one() } else { T::zero() };
                            gl[r * b + j] += scale * (probs[r * b + j] - ind);
                        }
                    }
                });
            }
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (n, d) = self.value(rec.q).dims2().expect("matrix");
        let dh = d / rec.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(rec.q).data();
        let kd = self.value(rec.k).data();
        let vd = self.value(rec.v).data();
        let sink_data = rec.sink.map(|(sk, sv)| (self.value(sk).data(), self.value(sv).data()));
        let extra = usize::from(rec.sink.is_some());

        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gv = vec![T::zero(); n * d];
        let mut gsk = vec![T::zero(); d];
        let mut gsv = vec![T::zero(); d];
        let mut dp = Vec::new();

        let mut slot = 0;
        for grp in &rec.layout.groups {
            let m = grp.members.len();
            let width = m + extra;
            for h in 0..rec.heads {
                let off = h * dh;
                let p = &rec.probs[slot];
                slot += 1;
                for (qi, &qc) in grp.members.iter().enumerate() {
                    let prow = &p[qi * width..(qi + 1) * width];
                    let go = &g[qc * d + off..qc * d + off + dh];
                    dp.clear();
                    dp.resize(width, T::zero());
                    for (kj, &kc) in grp.members.iter().enumerate() {
                        let w = prow[kj];
                        if w == T::zero() {
                            continue;
                        }
                        dp[kj] = dot(go, &vd[kc * d + off..kc * d + off + dh]);
                        let gvrow = &mut gv[kc * d + off..kc * d + off + dh];
                        for (a, &b) in gvrow.iter_mut().zip(go) {
                            *a += w * b;
                        }
                    }
                    if let Some((_, sv)) = sink_data {
                        let w = prow[m];
                        dp[m] = dot(go, &sv[off..off + dh]);
                        for (a, &b) in gsv[off..off + dh].iter_mut().zip(go) {
                            *a += w * b;
                        }
                    }
                    let inner = dot(prow, &dp);
                    let qrow = &qd[qc * d + off..qc * d + off + dh];
                    for (kj, &kc) in grp.members.iter().enumerate() {
                        let w = prow[kj];
                        if w == T::zero() {
                            continue;
                        }
                        let ds = w * (dp[kj] - inner) * scale;
                        let krow = &kd[kc * d + off..kc * d + off + dh];
                        let gqrow = &mut gq[qc * d + off..qc * d + off + dh];
                        for (a, &b) in gqrow.iter_mut().zip(krow) {
                            *a += ds * b;
                        }
                        let gkrow = &mut gk[kc * d + off..kc * d + off + dh];
                        for (a, &b) in gkrow.iter_mut().zip(qrow) {
                            *a += ds * b;
                        }
                    }
                    if let Some((sk, _)) = sink_data {
                        let ds = prow[m] * (dp[m] - inner) * scale;
                        let gqrow = &mut gq[qc * d + off..qc * d + off + dh];
                        for (a, &b) in gqrow.iter_mut().zip(&sk[off..off + dh]) {
                            *a += ds * b;
                        }
                        for (a, &b) in gsk[off..off + dh].iter_mut().zip(qrow) {
                            *a += ds * b;
                        }
                    }
                }
            }
        }

        let add = |dst: &mut [T], src: &[T]| {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        };
        self.accumulate(grads, rec.q, |t| add(t, &gq));
        self.accumulate(grads, rec.k, |t| add(t, &gk));
        self.accumulate(grads, rec.v, |t| add(t, &gv));
        if let Some((sk, sv)) = rec.sink {
            self.accumulate(grads, sk, |t| add(t, &gsk));
            self.accumulate(grads, sv, |t| add(t, &gsv));
        }
    }
}

/// Sum of squares of all gradient entries, accumulated in `f64`.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}
