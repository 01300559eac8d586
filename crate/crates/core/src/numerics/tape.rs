//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep in
//! [`Tape::backward`] propagates gradients from a scalar loss back to the
//! parameter leaves. Gradients for parameters are returned rather than
//! written, which keeps the tape's borrow of the [`ParamStore`] immutable.
//!
//! The forward pass is generic over the scalar type so the same graph can
//! be evaluated in extended precision; the reverse sweep is `f64` only.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::real::{sigmoid, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Logit assigned to masked attention keys.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// How a batch-norm node obtains its statistics.
pub enum NormStats<'m> {
    /// Compute from the unmasked rows of the batch. `valid` has one flag per
    /// row (all leading axes flattened); `None` means every row counts.
    Batch {
        valid: Option<&'m [bool]>,
        momentum: f64,
        running: Option<(ParamId, ParamId)>,
    },
    /// Use stored running statistics.
    Running { mean: ParamId, var: ParamId },
}

/// Pending exponential-moving-average update of batch-norm running stats.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.mean_id)
            .value
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(self.var_id)
            .value
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    SelectRows {
        cond: Vec<bool>,
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<S>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv: Vec<S>,
        // rows that entered the batch statistics; None in eval mode
        stat_rows: Option<Vec<bool>>,
        n_stat: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Step {
        x: Var,
        t: usize,
    },
    Reshape {
        x: Var,
    },
    MaskedMean {
        x: Var,
        valid: Vec<bool>,
        counts: Vec<usize>,
    },
    Bce {
        probs: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
        clamped: Vec<bool>,
    },
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<'a, S = f64> {
    store: &'a ParamStore,
    nodes: Vec<Node<S>>,
    param_leaves: HashMap<ParamId, Var>,
    record_kinks: bool,
    kinks: Vec<bool>,
    // kink flags contributed by each node, as a range into `kinks`
    node_kinks: Vec<(usize, usize)>,
    stat_updates: Vec<StatUpdate>,
    offset: Option<(ParamId, usize, S)>,
    base: Option<&'a Snapshot<S>>,
    // whether each node may differ from the base snapshot
    dirty: Vec<bool>,
}

/// Node values and kink flags of a finished forward pass, used to skip
/// recomputation in a later pass over the same graph.
pub struct Snapshot<S> {
    values: Vec<Tensor<S>>,
    kinks: Vec<bool>,
    node_kinks: Vec<(usize, usize)>,
}

fn check_finite<S: Real>(t: &Tensor<S>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NumericInput(format!("{what} contains NaN or infinity")))
    }
}

fn map<S: Real>(t: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape::in_precision(store)
    }
}

impl<'a, S: Real> Tape<'a, S> {
    /// A tape whose forward pass computes in `S`.
    pub fn in_precision(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            record_kinks: false,
            kinks: Vec::new(),
            node_kinks: Vec::new(),
            stat_updates: Vec::new(),
            offset: None,
            base: None,
            dirty: Vec::new(),
        }
    }

    /// Reuses values of `base` for every node that does not depend on the
    /// offset parameter. `base` must come from the same sequence of
    /// operations on the same inputs; the results are bit-identical to a
    /// full recomputation.
    pub fn with_base(mut self, base: &'a Snapshot<S>) -> Self {
        self.base = Some(base);
        self
    }

    /// Ends the pass, keeping node values for [`Tape::with_base`].
    pub fn into_snapshot(self) -> Snapshot<S> {
        Snapshot {
            values: self.nodes.into_iter().map(|n| n.value).collect(),
            kinks: self.kinks,
            node_kinks: self.node_kinks,
        }
    }

    fn reuse(&mut self, inputs: &[Var]) -> Option<Var> {
        let base = self.base?;
        let i = self.nodes.len();
        if i >= base.values.len() || inputs.iter().any(|v| self.dirty[v.0]) {
            return None;
        }
        let (a, b) = base.node_kinks[i];
        if self.record_kinks {
            self.kinks.extend_from_slice(&base.kinks[a..b]);
        }
        Some(self.push_flagged(base.values[i].clone(), Op::Leaf, false))
    }

    /// Record on/off state of every rectifier and clamp, so callers can
    /// detect when a perturbation crosses a non-differentiable point.
    pub fn with_kink_recording(mut self) -> Self {
        self.record_kinks = true;
        self
    }

    /// Reads coordinate `coord` of parameter `id` as its stored value plus
    /// `delta`, with the addition done in `S`.
    pub fn with_offset(mut self, id: ParamId, coord: usize, delta: S) -> Self {
        self.offset = Some((id, coord, delta));
        self
    }

    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.push_flagged(value, op, true)
    }

    fn push_flagged(&mut self, value: Tensor<S>, op: Op<S>, dirty: bool) -> Var {
        let start = self.node_kinks.last().map_or(0, |r| r.1);
        self.node_kinks.push((start, self.kinks.len()));
        self.dirty.push(dirty);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<S>) -> Result<Tensor<S>> {
        Tensor::from_parts(shape, data)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.cast();
        self.push_flagged(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let mut value: Tensor<S> = self.store.value(id).cast();
        let mut dirty = false;
        if let Some((oid, c, delta)) = self.offset {
            if oid == id {
                value.data_mut()[c] += delta;
                dirty = true;
            }
        }
        let v = self.push_flagged(value, Op::Param(id), dirty);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// `x · wᵀ + b` over the last axis of `x`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if let Some(v) = self.reuse(&[x, w].into_iter().chain(b).collect::<Vec<_>>()) {
            return Ok(v);
        }
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[1] {
            return Err(Error::dim(format!(
                "dense: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (g, f) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [g] {
                return Err(Error::dim(format!(
                    "dense: bias {:?} does not match weight {:?}",
                    bv.shape(),
                    wv.shape()
                )));
            }
        }
        let rows = xv.rows();
        let mut out = vec![S::zero(); rows * g];
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..rows {
            let xr = &xd[r * f..(r + 1) * f];
            let or = &mut out[r * g..(r + 1) * g];
            for (j, o) in or.iter_mut().enumerate() {
                *o = dot(xr, &wd[j * f..(j + 1) * f]);
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                for (o, &bb) in out[r * g..(r + 1) * g].iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = g;
        let t = Self::tensor(shape, out)?;
        Ok(self.push(t, Op::Dense { x, w, b }))
    }

    /// Elementwise `a + b`, where `b`'s shape may be a trailing suffix of
    /// `a`'s shape (broadcast over the leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[a, b]) {
            return Ok(v);
        }
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("add: {sa:?} and {sb:?} do not broadcast")));
        }
        let n = bv.len();
        let data: Vec<S> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % n])
            .collect();
        let t = Self::tensor(sa.to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[a, b]) {
            return Ok(v);
        }
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "sub: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let t = Self::tensor(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[a, b]) {
            return Ok(v);
        }
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Self::tensor(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let (sc, sh) = (S::from_f64(scale), S::from_f64(shift));
        let t = map(self.value(x), |v| sc * v + sh);
        self.push(t, Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let t = map(self.value(x), |v| v.max(S::zero()));
        if self.record_kinks {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > S::zero()).collect();
            self.kinks.extend(signs);
        }
        self.push(t, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let t = map(self.value(x), sigmoid);
        self.push(t, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let t = map(self.value(x), S::tanh);
        self.push(t, Op::Tanh { x })
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if let Some(v) = self.reuse(&[x]) {
            return Ok(v);
        }
        let xv = self.value(x);
        if c.len() != xv.len() {
            return Err(Error::dim(format!(
                "mul_const: {} constants for tensor {:?}",
                c.len(),
                xv.shape()
            )));
        }
        let data = xv.data().iter().zip(&c).map(|(&a, &b)| a * S::from_f64(b)).collect();
        let t = Self::tensor(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst { x, c }))
    }

    /// Row `i` of the result is row `i` of `a` when `cond[i]`, else of `b`.
    pub fn select_rows(&mut self, cond: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[a, b]) {
            return Ok(v);
        }
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rows() != cond.len() {
            return Err(Error::dim(format!(
                "select_rows: {:?} vs {:?} with {} flags",
                av.shape(),
                bv.shape(),
                cond.len()
            )));
        }
        let c = av.last_dim();
        let mut data = Vec::with_capacity(av.len());
        for (i, &take_a) in cond.iter().enumerate() {
            let src = if take_a { av } else { bv };
            data.extend_from_slice(&src.data()[i * c..(i + 1) * c]);
        }
        let t = Self::tensor(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::SelectRows { cond, a, b }))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.reuse(&[x]) {
            return Ok(v);
        }
        let xv = self.value(x);
        check_finite(xv, "softmax input")?;
        let c = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Self::tensor(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { x }))
    }

    /// Scaled dot-product self-attention for `heads` heads on already
    /// projected queries, keys and values of shape `[B, T, D]`.
    /// `key_valid` holds one flag per `(b, t)`; invalid keys get weight 0.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_valid: &[bool],
        heads: usize,
    ) -> Result<Var> {
        if let Some(v) = self.reuse(&[q, k, v]) {
            return Ok(v);
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let shape = qv.shape().to_vec();
        if shape.len() != 3 || kv.shape() != shape || vv.shape() != shape {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d} not divisible by {heads} heads"
            )));
        }
        if key_valid.len() != b * t {
            return Err(Error::dim(format!(
                "attention: {} mask flags for batch {b} x {t}",
                key_valid.len()
            )));
        }
        let dh = d / heads;
        let scale = S::one() / S::from_f64(dh as f64).sqrt();
        let masked = S::from_f64(MASKED_LOGIT);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut weights = vec![S::zero(); b * heads * t * t];
        let mut out = vec![S::zero(); b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for ti in 0..t {
                    let qrow = &qd[(bi * t + ti) * d + off..(bi * t + ti) * d + off + dh];
                    let wrow = &mut weights[((bi * heads + h) * t + ti) * t..][..t];
                    for (s, w) in wrow.iter_mut().enumerate() {
                        *w = if key_valid[bi * t + s] {
                            let krow = &kd[(bi * t + s) * d + off..(bi * t + s) * d + off + dh];
                            dot(qrow, krow) * scale
                        } else {
                            masked
                        };
                    }
                    softmax_in_place(wrow);
                    let orow = &mut out[(bi * t + ti) * d + off..(bi * t + ti) * d + off + dh];
                    for (s, &w) in wrow.iter().enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        let vrow = &vd[(bi * t + s) * d + off..(bi * t + s) * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let out = Self::tensor(shape, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
        ))
    }

    /// Batch normalization over the last axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<Var> {
        if let Some(v) = self.reuse(&[x, gamma, beta]) {
            return Ok(v);
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dim(format!(
                "batch_norm: affine parameters must have shape [{d}]"
            )));
        }
        let xd = xv.data();
        let (mean, var, stat_rows, n_stat, pending) = match stats {
            NormStats::Batch {
                valid,
                momentum,
                running,
            } => {
                let flags: Vec<bool> = match valid {
                    Some(v) if v.len() != rows => {
                        return Err(Error::dim(format!(
                            "batch_norm: {} mask flags for {rows} rows",
                            v.len()
                        )))
                    }
                    Some(v) => v.to_vec(),
                    None => vec![true; rows],
                };
                let n = flags.iter().filter(|&&f| f).count();
                if n == 0 {
                    return Err(Error::Degenerate(
                        "batch_norm: every position is masked".into(),
                    ));
                }
                let nn = S::from_f64(n as f64);
                let mut mean = vec![S::zero(); d];
                for (r, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
                    for (m, &v) in mean.iter_mut().zip(&xd[r * d..(r + 1) * d]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nn);
                let mut var = vec![S::zero(); d];
                for (r, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
                    for ((s, &v), &m) in var.iter_mut().zip(&xd[r * d..(r + 1) * d]).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= nn);
                let pending = running.map(|(mean_id, var_id)| StatUpdate {
                    mean_id,
                    var_id,
                    batch_mean: mean.iter().map(|v| v.to_f64()).collect(),
                    batch_var: var.iter().map(|v| v.to_f64()).collect(),
                    momentum,
                });
                (mean, var, Some(flags), n, pending)
            }
            NormStats::Running { mean, var } => (
                self.store.value(mean).cast::<S>().into_data(),
                self.store.value(var).cast::<S>().into_data(),
                None,
                0,
                None,
            ),
        };
        let eps = S::from_f64(eps);
        let inv: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for r in 0..rows {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (xd[i] - mean[c]) * inv[c];
                out[i] = gd[c] * xhat[i] + bd[c];
            }
        }
        let t = Self::tensor(xv.shape().to_vec(), out)?;
        self.stat_updates.extend(pending);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
                stat_rows,
                n_stat,
            },
        ))
    }

    /// Layer normalization of every row over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if let Some(v) = self.reuse(&[x, gamma, beta]) {
            return Ok(v);
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: affine parameters must have shape [{d}]"
            )));
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let (dn, eps) = (S::from_f64(d as f64), S::from_f64(eps));
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        let mut inv = vec![S::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            inv[r] = S::one() / (var + eps).sqrt();
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (row[c] - mean) * inv[r];
                out[i] = gd[c] * xhat[i] + bd[c];
            }
        }
        let t = Self::tensor(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            },
        ))
    }

    /// Gathers rows of `table` (`[V, E]`); the result has shape
    /// `ids_shape ++ [E]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>, ids_shape: &[usize]) -> Result<Var> {
        if let Some(v) = self.reuse(&[table]) {
            return Ok(v);
        }
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::dim("embedding table must be a matrix"));
        }
        let (v, e) = (tv.shape()[0], tv.shape()[1]);
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding: ids do not match ids_shape"));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in &ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let mut shape = ids_shape.to_vec();
        shape.push(e);
        let t = Self::tensor(shape, data)?;
        Ok(self.push(t, Op::Embedding { table, ids }))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: Vec<Var>) -> Result<Var> {
        if let Some(v) = self.reuse(&parts.clone()) {
            return Ok(v);
        }
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in &parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat: leading axes {:?} vs {lead:?}",
                    &s[..s.len() - 1]
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Self::tensor(shape, data)?;
        Ok(self.push(t, Op::Concat { parts }))
    }

    /// Time slice `x[:, t, :]` of a `[B, T, F]` tensor.
    pub fn step(&mut self, x: Var, t: usize) -> Result<Var> {
        if let Some(v) = self.reuse(&[x]) {
            return Ok(v);
        }
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::dim(format!("step {t} of tensor {s:?}")));
        }
        let (b, tt, f) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * f);
        for bi in 0..b {
            data.extend_from_slice(&xv.data()[(bi * tt + t) * f..(bi * tt + t + 1) * f]);
        }
        let out = Self::tensor(vec![b, f], data)?;
        Ok(self.push(out, Op::Step { x, t }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if let Some(v) = self.reuse(&[x]) {
            return Ok(v);
        }
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Mean over the valid time steps of a `[B, T, D]` tensor.
    pub fn masked_mean(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        if let Some(v) = self.reuse(&[x]) {
            return Ok(v);
        }
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || valid.len() != s[0] * s[1] {
            return Err(Error::dim(format!(
                "masked_mean: tensor {s:?} with {} flags",
                valid.len()
            )));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut out = vec![S::zero(); b * d];
        let mut counts = vec![0; b];
        for bi in 0..b {
            for ti in 0..t {
                if valid[bi * t + ti] {
                    counts[bi] += 1;
                    for (o, &v) in out[bi * d..(bi + 1) * d]
                        .iter_mut()
                        .zip(&xv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d])
                    {
                        *o += v;
                    }
                }
            }
            if counts[bi] == 0 {
                return Err(Error::Degenerate(format!("sample {bi} is fully masked")));
            }
            let n = S::from_f64(counts[bi] as f64);
            out[bi * d..(bi + 1) * d].iter_mut().for_each(|o| *o /= n);
        }
        let t = Self::tensor(vec![b, d], out)?;
        Ok(self.push(
            t,
            Op::MaskedMean {
                x,
                valid: valid.to_vec(),
                counts,
            },
        ))
    }

    /// Mean binary cross-entropy on the class-1 column of `probs` (`[N, 2]`).
    /// `weights` scales each sample's term; the sum is still divided by N.
    pub fn bce(&mut self, probs: Var, labels: &[f64], weights: &[f64], clamp: f64) -> Result<Var> {
        if let Some(v) = self.reuse(&[probs]) {
            return Ok(v);
        }
        let pv = self.value(probs);
        if pv.shape().len() != 2 || pv.shape()[1] != 2 {
            return Err(Error::dim(format!(
                "bce expects [N, 2] probabilities, got {:?}",
                pv.shape()
            )));
        }
        let n = pv.shape()[0];
        if labels.len() != n || weights.len() != n {
            return Err(Error::dim("bce: labels/weights length mismatch"));
        }
        let (lo, hi) = (S::from_f64(clamp), S::from_f64(1.0 - clamp));
        let mut total = S::zero();
        let mut clamped = Vec::with_capacity(n);
        for i in 0..n {
            let raw = pv.data()[i * 2 + 1];
            let p = if raw < lo {
                lo
            } else if raw > hi {
                hi
            } else {
                raw
            };
            clamped.push(p != raw);
            let y = S::from_f64(labels[i]);
            total += S::from_f64(weights[i]) * (y * p.ln() + (S::one() - y) * (S::one() - p).ln());
        }
        if self.record_kinks {
            self.kinks.extend(clamped.iter().copied());
        }
        let loss = -total / S::from_f64(n as f64);
        Ok(self.push(
            Self::tensor(vec![1], vec![loss])?,
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                clamped,
            },
        ))
    }

    /// `Σ wᵢ xᵢ` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        if let Some(v) = self.reuse(&[x]) {
            return Ok(v);
        }
        let xv = self.value(x);
        if w.len() != xv.len() {
            return Err(Error::dim("weighted_sum: weight length mismatch"));
        }
        let s = xv.data().iter().zip(&w).map(|(&a, &b)| a * S::from_f64(b)).sum();
        Ok(self.push(Self::tensor(vec![1], vec![s])?, Op::WeightedSum { x, w }))
    }
}

impl<'a> Tape<'a> {
    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// parameter leaf reached.
    pub fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        Ok(self.gradients(loss)?.into_params())
    }

    /// Reverse sweep returning gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Vec::new();
        let mut params = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&self.nodes[i].op, &g) {
                let shape = self.value(Var(i)).shape().to_vec();
                params.push((*id, Tensor::new(shape, g.clone())?));
            }
            out.push(g);
        }
        Ok(Gradients { grads: out, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len_of = |v: Var| self.value(v).len();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = len_of(v);
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let out = Some(&self.nodes[i].value);
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gdim, f) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                let (xd, wd) = (xv.data(), wv.data());
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        let dxr = &mut dx[r * f..(r + 1) * f];
                        for j in 0..gdim {
                            let gj = g[r * gdim + j];
                            if gj == 0.0 {
                                continue;
                            }
                            for (d, wv) in dxr.iter_mut().zip(&wd[j * f..(j + 1) * f]) {
                                *d += gj * wv;
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for r in 0..rows {
                        let xr = &xd[r * f..(r + 1) * f];
                        for j in 0..gdim {
                            let gj = g[r * gdim + j];
                            if gj == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[j * f..(j + 1) * f].iter_mut().zip(xr) {
                                *d += gj * xv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for r in 0..rows {
                            for (d, gv) in db.iter_mut().zip(&g[r * gdim..(r + 1) * gdim]) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                let nb = len_of(*b);
                acc(*b, &mut |db| {
                    for (k, gv) in g.iter().enumerate() {
                        db[k % nb] += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * bd[k];
                    }
                });
                acc(*b, &mut |db| {
                    for k in 0..g.len() {
                        db[k] += g[k] * ad[k];
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gv)| *d += scale * gv));
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for k in 0..g.len() {
                        if xd[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yd = out.unwrap().data();
                acc(*x, &mut |dx| {
                    for k in 0..g.len() {
                        dx[k] += g[k] * yd[k] * (1.0 - yd[k]);
                    }
                });
            }
            Op::Tanh { x } => {
                let yd = out.unwrap().data();
                acc(*x, &mut |dx| {
                    for k in 0..g.len() {
                        dx[k] += g[k] * (1.0 - yd[k] * yd[k]);
                    }
                });
            }
            Op::MulConst { x, c } => {
                acc(*x, &mut |dx| {
                    for k in 0..g.len() {
                        dx[k] += g[k] * c[k];
                    }
                });
            }
            Op::SelectRows { cond, a, b } => {
                let w = g.len() / cond.len();
                acc(*a, &mut |da| {
                    for (r, &ta) in cond.iter().enumerate() {
                        if ta {
                            add_into(&mut da[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (r, &ta) in cond.iter().enumerate() {
                        if !ta {
                            add_into(&mut db[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let y = out.unwrap();
                let c = y.last_dim();
                acc(*x, &mut |dx| {
                    for (r, yr) in y.data().chunks(c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            dx[r * c + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let shape = self.shape(*q);
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; b * t * d];
                let mut dk = vec![0.0; b * t * d];
                let mut dv = vec![0.0; b * t * d];
                let mut da = vec![0.0; t];
                for bi in 0..b {
                    for h in 0..*heads {
                        let off = h * dh;
                        let row = |tt: usize| (bi * t + tt) * d + off;
                        for ti in 0..t {
                            let wrow = &weights[((bi * heads + h) * t + ti) * t..][..t];
                            let grow = &g[row(ti)..row(ti) + dh];
                            // dA = dO · Vᵀ ; dV += Aᵀ · dO
                            for s in 0..t {
                                let vrow = &vd[row(s)..row(s) + dh];
                                da[s] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                                if wrow[s] != 0.0 {
                                    for (dvv, gg) in dv[row(s)..row(s) + dh].iter_mut().zip(grow) {
                                        *dvv += wrow[s] * gg;
                                    }
                                }
                            }
                            let dot: f64 = da.iter().zip(wrow).map(|(a, c)| a * c).sum();
                            for s in 0..t {
                                let ds = wrow[s] * (da[s] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for j in 0..dh {
                                    dq[row(ti) + j] += ds * kd[row(s) + j];
                                    dk[row(s) + j] += ds * qd[row(ti) + j];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |x| add_into(x, &dq));
                acc(*k, &mut |x| add_into(x, &dk));
                acc(*v, &mut |x| add_into(x, &dv));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
                stat_rows,
                n_stat,
            } => {
                let d = inv.len();
                let rows = g.len() / d;
                let gd = self.value(*gamma).data();
                acc(*gamma, &mut |dg| {
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                });
                match stat_rows {
                    None => acc(*x, &mut |dx| {
                        for r in 0..rows {
                            for c in 0..d {
                                dx[r * d + c] += g[r * d + c] * gd[c] * inv[c];
                            }
                        }
                    }),
                    Some(flags) => {
                        // statistics depend on the unmasked rows; every row
                        // (masked or not) is normalized with them
                        let n = *n_stat as f64;
                        let mut sum_gx = vec![0.0; d];
                        let mut sum_gx_xhat = vec![0.0; d];
                        for r in 0..rows {
                            for c in 0..d {
                                let gx = g[r * d + c] * gd[c];
                                sum_gx[c] += gx;
                                sum_gx_xhat[c] += gx * xhat[r * d + c];
                            }
                        }
                        acc(*x, &mut |dx| {
                            for r in 0..rows {
                                for c in 0..d {
                                    let i = r * d + c;
                                    let mut v = g[i] * gd[c] * inv[c];
                                    if flags[r] {
                                        v -= inv[c] / n * (sum_gx[c] + xhat[i] * sum_gx_xhat[c]);
                                    }
                                    dx[i] += v;
                                }
                            }
                        });
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let rows = inv.len();
                let d = g.len() / rows;
                let gd = self.value(*gamma).data();
                acc(*gamma, &mut |dg| {
                    for i in 0..g.len() {
                        dg[i % d] += g[i] * xhat[i];
                    }
                });
                acc(*beta, &mut |db| {
                    for i in 0..g.len() {
                        db[i % d] += g[i];
                    }
                });
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let gx = g[r * d + c] * gd[c];
                            s1 += gx;
                            s2 += gx * xhat[r * d + c];
                        }
                        let dn = d as f64;
                        for c in 0..d {
                            let i = r * d + c;
                            let gx = g[i] * gd[c];
                            dx[i] += inv[r] / dn * (dn * gx - s1 - xhat[i] * s2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let e = self.value(*table).shape()[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                });
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    acc(p, &mut |dp| {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Step { x, t } => {
                let s = self.shape(*x);
                let (b, tt, f) = (s[0], s[1], s[2]);
                acc(*x, &mut |dx| {
                    for bi in 0..b {
                        add_into(
                            &mut dx[(bi * tt + t) * f..(bi * tt + t + 1) * f],
                            &g[bi * f..(bi + 1) * f],
                        );
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |dx| add_into(dx, g)),
            Op::MaskedMean { x, valid, counts } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                acc(*x, &mut |dx| {
                    for bi in 0..b {
                        let n = counts[bi] as f64;
                        for ti in 0..t {
                            if valid[bi * t + ti] {
                                for c in 0..d {
                                    dx[(bi * t + ti) * d + c] += g[bi * d + c] / n;
                                }
                            }
                        }
                    }
                });
            }
            Op::Bce {
                probs,
                labels,
                weights,
                clamped,
            } => {
                let pd = self.value(*probs).data();
                let n = labels.len() as f64;
                acc(*probs, &mut |dp| {
                    for i in 0..labels.len() {
                        if clamped[i] {
                            continue;
                        }
                        let p = pd[i * 2 + 1];
                        let y = labels[i];
                        dp[i * 2 + 1] += -g[0] * weights[i] / n * (y / p - (1.0 - y) / (1.0 - p));
                    }
                });
            }
            Op::WeightedSum { x, w } => {
                acc(*x, &mut |dx| {
                    for k in 0..w.len() {
                        dx[k] += g[0] * w[k];
                    }
                });
            }
        }
    }
}

/// Gradients of one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros if the node was unreached.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; len])
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row.iter().copied().fold(row[0], S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
