//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and, when
//! gradients are enabled, whatever it needs for the backward pass. Node
//! order is creation order, which is a topological order of the graph, so
//! `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::counter::{count_only, record_macs, round_storage, verify_enabled};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which (query, key) pairs may interact inside a batched attention op.
///
/// Queries are laid out as `batch * q_len` rows and keys as `batch * k_len`
/// rows; `key_valid` marks non-padding keys.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttnMask {
    pub fn full(batch: usize, q_len: usize, k_len: usize) -> Self {
        AttnMask {
            batch,
            q_len,
            k_len,
            key_valid: vec![true; batch * k_len],
            causal: false,
        }
    }

    #[inline]
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    ConcatCols(Var, Var),
    TopKRenorm {
        p: Var,
        idx: Vec<usize>,
        k: usize,
    },
    MoeCombine {
        outs: Vec<Var>,
        weights: Var,
        slots: Vec<(usize, usize)>,
        k: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Summary of one backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes whose local gradient rule ran (each at most once).
    pub visited: usize,
}

pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'s> Tape<'s> {
    /// A recording tape without a parameter store.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A recording tape whose parameter leaves borrow from `store`.
    pub fn with_store(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            ..Tape::new()
        }
    }

    /// A tape that records no backward information.
    pub fn inference(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self
                .store
                .expect("parameter leaf on a tape without store")
                .get(*id)
                .value,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Makes later `param(id)` calls resolve to `v`; used to probe layers
    /// with substituted parameter values.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    /// Gradients of every parameter leaf, summed per parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for node in &self.nodes {
            if let (Value::Param(id), Some(g)) = (&node.value, &node.grad) {
                out.push((*id, g.clone()));
            }
        }
        out
    }

    fn push(&mut self, mut t: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        round_storage(t.data_mut());
        if verify_enabled() && !t.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by {} at node {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ------------------------------------------------------------------
    // operations

    /// Matrix product `[m×k] · [k×n]`. Counts `m·k·n` multiply-accumulates.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        if !count_only() {
            gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        }
        record_macs((m * k * n) as u64);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("add of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("mul of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// Adds a vector along the trailing axis (the only broadcast supported).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() || tb.ndim() != 1 {
            return Err(Error::dim(format!(
                "bias {:?} does not match trailing extent of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::AddBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(t, Op::Relu(x), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    /// Permuting the entries along `axis` permutes the output bit-exactly.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(Error::dim(format!(
                "softmax axis {axis} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut out = tx.data().to_vec();
        let mut terms = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                for j in 0..len {
                    out[at(j)] = (out[at(j)] - mx).exp();
                }
                // Summing in sorted order makes the normalizer, and hence
                // every output, independent of the order of the entries.
                terms.clear();
                terms.extend((0..len).map(|j| out[at(j)]));
                terms.sort_unstable_by(f64::total_cmp);
                let s: f64 = terms.iter().sum();
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis }, &[x])
    }

    /// Row-wise layer normalization with affine rescale.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(Error::dim(format!(
                "layer norm of {:?} with gain {:?} and bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(t, op, &[x, gamma, beta])
    }

    /// Batched multi-head scaled dot-product attention over already
    /// projected queries, keys and values. Masked pairs get zero weight; a
    /// query with no admissible key yields a zero row.
    ///
    /// Counts `batch·q_len·k_len·d` multiply-accumulates for the score
    /// product and the same again for the value product.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let (bsz, lq, lk) = (mask.batch, mask.q_len, mask.k_len);
        if tq.rows() != bsz * lq || tk.rows() != bsz * lk || tv.rows() != bsz * lk {
            return Err(Error::dim(format!(
                "attention rows q{:?} k{:?} v{:?} vs mask batch {bsz} × ({lq}, {lk})",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if tk.cols() != d || tv.cols() != d {
            return Err(Error::dim("attention widths differ".to_string()));
        }
        if mask.key_valid.len() != bsz * lk {
            return Err(Error::dim(format!(
                "key mask has {} entries, expected {}",
                mask.key_valid.len(),
                bsz * lk
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; bsz * heads * lq * lk];
        let mut out = vec![0.0; bsz * lq * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0; lk];
        let batches = if count_only() { 0 } else { bsz };
        for b in 0..batches {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qi = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if mask.allowed(b, i, j) {
                            let kj = &kd[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        continue;
                    }
                    let pbase = ((b * heads + h) * lq + i) * lk;
                    let mut z = 0.0;
                    for j in 0..lk {
                        if mask.allowed(b, i, j) {
                            let e = (scores[j] - mx).exp();
                            probs[pbase + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    for j in 0..lk {
                        let p = probs[pbase + j] / z;
                        probs[pbase + j] = p;
                        if p != 0.0 {
                            let vj = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                            for (o, vv) in orow.iter_mut().zip(vj) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        record_macs(2 * (bsz * lq * lk * d) as u64);
        let t = Tensor::new(vec![bsz * lq, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            mask: mask.clone(),
            probs,
        };
        self.push(t, op, &[q, k, v])
    }

    /// Selects rows of a matrix; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!("row {i} out of range for {:?}", tx.shape())));
            }
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Places the rows of each part at the given row indices of a
    /// `[rows×cols]` result. Indices must not repeat; uncovered rows are 0.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize, cols: usize) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        let mut seen = vec![false; rows];
        for (v, idx) in &parts {
            let t = self.value(*v);
            if t.rows() != idx.len() || t.cols() != cols {
                return Err(Error::dim(format!(
                    "scatter part {:?} with {} indices into width {cols}",
                    t.shape(),
                    idx.len()
                )));
            }
            for (src, &dst) in idx.iter().enumerate() {
                if dst >= rows || seen[dst] {
                    return Err(Error::dim(format!("scatter index {dst} invalid or repeated")));
                }
                seen[dst] = true;
                out[dst * cols..(dst + 1) * cols].copy_from_slice(t.row(src));
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(t, Op::ScatterRows { parts }, &inputs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.rows() != tb.rows() {
            return Err(Error::dim(format!(
                "concat of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let t = Tensor::new(vec![m, p + q], out)?;
        self.push(t, Op::ConcatCols(a, b), &[a, b])
    }

    /// Picks `k` entries per row of a distribution matrix at `idx` (row-major
    /// `[rows×k]`) and divides them by their row sum.
    pub fn top_k_renorm(&mut self, p: Var, idx: &[usize], k: usize) -> Result<Var> {
        let tp = self.value(p);
        let (rows, n) = (tp.rows(), tp.cols());
        if k == 0 || idx.len() != rows * k || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim(format!(
                "top-{k} selection of {} indices from {:?}",
                idx.len(),
                tp.shape()
            )));
        }
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let sel = &idx[r * k..(r + 1) * k];
            let s: f64 = sel.iter().map(|&i| tp.data()[r * n + i]).sum();
            for (j, &i) in sel.iter().enumerate() {
                out[r * k + j] = tp.data()[r * n + i] / s;
            }
        }
        let t = Tensor::new(vec![rows, k], out)?;
        let op = Op::TopKRenorm {
            p,
            idx: idx.to_vec(),
            k,
        };
        self.push(t, op, &[p])
    }

    /// Weighted combination of expert outputs: row `t` of the result is
    /// `Σ_r weights[t,r] · outs[e][i]` where `slots[t·k + r] = (e, i)`,
    /// accumulated in rank order.
    pub fn moe_combine(&mut self, outs: Vec<Var>, weights: Var, slots: Vec<(usize, usize)>, k: usize) -> Result<Var> {
        let tw = self.value(weights);
        let rows = tw.rows();
        if tw.cols() != k || slots.len() != rows * k {
            return Err(Error::dim(format!(
                "combine weights {:?} with {} slots for k={k}",
                tw.shape(),
                slots.len()
            )));
        }
        let d = match outs.first() {
            Some(&v) => self.value(v).cols(),
            None if rows == 0 => 0,
            None => return Err(Error::dim("combine without expert outputs")),
        };
        let mut out = vec![0.0; rows * d];
        for t in 0..rows {
            let orow = &mut out[t * d..(t + 1) * d];
            for r in 0..k {
                let (e, i) = slots[t * k + r];
                let w = tw.data()[t * k + r];
                let src = self.value(outs[e]).row(i);
                for (o, s) in orow.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let mut inputs = outs.clone();
        inputs.push(weights);
        let t = Tensor::new(vec![rows, d], out)?;
        let op = Op::MoeCombine {
            outs,
            weights,
            slots,
            k,
        };
        self.push(t, op, &inputs)
    }

    /// Weighted, label-smoothed cross-entropy summed over rows:
    /// `Σ_m w_m · [ −(1−ε)·log p(target_m) − (ε/V)·Σ_v log p_v ]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64], smoothing: f64) -> Result<Var> {
        let tl = self.value(logits);
        let (m, v) = (tl.rows(), tl.cols());
        if targets.len() != m || weights.len() != m || targets.iter().any(|&t| t >= v) {
            return Err(Error::dim(format!(
                "cross entropy over {:?} with {} targets",
                tl.shape(),
                targets.len()
            )));
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for r in 0..m {
            let row = tl.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for (j, x) in row.iter().enumerate() {
                probs[r * v + j] = (x - lse).exp();
            }
            if weights[r] == 0.0 {
                continue;
            }
            let nll = lse - row[targets[r]];
            let smooth = if smoothing > 0.0 {
                row.iter().map(|x| lse - x).sum::<f64>() / v as f64
            } else {
                0.0
            };
            loss += weights[r] * ((1.0 - smoothing) * nll + smoothing * smooth);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            smoothing,
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    // ------------------------------------------------------------------
    // backward

    /// Populates gradients of every node reachable from the scalar `loss`.
    /// Leaf gradients accumulate across calls; interior ones are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(BackwardReport { visited: 0 });
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0].grad, &[1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            visited += 1;
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.nodes[v.0].grad, &dg);
                }
            }
        }
        Ok(BackwardReport { visited })
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), &mut da, 0.0);
                    res.push((*a, da));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), &mut db, 0.0);
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddBias(x, b) => {
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let dx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let s: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let n = tg.len();
                let rows = rstd.len();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dhh = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * tg.data()[j];
                        mean_dh += dh;
                        mean_dhh += dh * hr[j];
                    }
                    mean_dh /= n as f64;
                    mean_dhh /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * tg.data()[j];
                        dx[r * n + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dhh);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (bsz, lq, lk) = (mask.batch, mask.q_len, mask.k_len);
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dv = vec![0.0; tv.len()];
                let mut dp = vec![0.0; lk];
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                for b in 0..bsz {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..lq {
                            let pbase = ((b * heads + h) * lq + i) * lk;
                            let go = &g[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                            let mut s = 0.0;
                            for j in 0..lk {
                                let p = probs[pbase + j];
                                if p == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vrow = (b * lk + j) * d + off;
                                dp[j] = dot(go, &vd[vrow..vrow + dh]);
                                s += p * dp[j];
                                for (dvv, gv) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                                    *dvv += p * gv;
                                }
                            }
                            let qrow = (b * lq + i) * d + off;
                            for j in 0..lk {
                                let p = probs[pbase + j];
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[j] - s) * scale;
                                let krow = (b * lk + j) * d + off;
                                for t in 0..dh {
                                    dq[qrow + t] += ds * kd[krow + t];
                                    dk[krow + t] += ds * qd[qrow + t];
                                }
                            }
                        }
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[dst * c + j] += g[src * c + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::ScatterRows { parts } => {
                let c = out.cols();
                parts
                    .iter()
                    .map(|(v, idx)| {
                        let mut dp = Vec::with_capacity(idx.len() * c);
                        for &dst in idx {
                            dp.extend_from_slice(&g[dst * c..(dst + 1) * c]);
                        }
                        (*v, dp)
                    })
                    .collect()
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let m = out.rows();
                let mut da = Vec::with_capacity(m * p);
                let mut db = Vec::with_capacity(m * q);
                for r in 0..m {
                    let row = &g[r * (p + q)..(r + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::TopKRenorm { p, idx, k } => {
                let tp = self.value(*p);
                let n = tp.cols();
                let mut dp = vec![0.0; tp.len()];
                for r in 0..tp.rows() {
                    let sel = &idx[r * k..(r + 1) * k];
                    let s: f64 = sel.iter().map(|&i| tp.data()[r * n + i]).sum();
                    let gw: f64 = (0..*k).map(|j| g[r * k + j] * tp.data()[r * n + sel[j]]).sum();
                    for (j, &i) in sel.iter().enumerate() {
                        dp[r * n + i] += g[r * k + j] / s - gw / (s * s);
                    }
                }
                vec![(*p, dp)]
            }
            Op::MoeCombine {
                outs,
                weights,
                slots,
                k,
            } => {
                let tw = self.value(*weights);
                let d = out.cols();
                let mut douts: Vec<Vec<f64>> = outs.iter().map(|v| vec![0.0; self.value(*v).len()]).collect();
                let mut dw = vec![0.0; tw.len()];
                for t in 0..out.rows() {
                    let gt = &g[t * d..(t + 1) * d];
                    for r in 0..*k {
                        let (e, i) = slots[t * k + r];
                        let w = tw.data()[t * k + r];
                        let src = self.value(outs[e]).row(i);
                        dw[t * k + r] = dot(src, gt);
                        for (dd, gv) in douts[e][i * d..(i + 1) * d].iter_mut().zip(gt) {
                            *dd += w * gv;
                        }
                    }
                }
                let mut res: Vec<(Var, Vec<f64>)> = outs.iter().copied().zip(douts).collect();
                res.push((*weights, dw));
                res
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let mut dl = vec![0.0; probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = w * g[0];
                    for j in 0..v {
                        let target = if j == t { 1.0 - smoothing } else { 0.0 } + smoothing / v as f64;
                        dl[r * v + j] = scale * (probs[r * v + j] - target);
                    }
                }
                vec![(*logits, dl)]
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias(..) => "add_bias",
        Op::Relu(..) => "relu",
        Op::Sum(..) => "sum",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::TopKRenorm { .. } => "top_k_renorm",
        Op::MoeCombine { .. } => "moe_combine",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = a · b + beta · c` for row-major `c` of shape `[m×n]`, with `a`
/// and `b` addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    // SAFETY: the asserts above bound every index the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
