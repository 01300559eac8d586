//! Composite layers built on the tape, plus tensor-in/tensor-out versions
//! of every kernel for callers that do not need gradients.

use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::rng::Rng;
use super::tape::{Mode, NormStats, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameter handles of one multi-head self-attention sublayer.
///
/// The key projection has no bias: a key bias adds the same amount to every
/// logit of a query, which softmax cancels.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Parameter handles of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruIds {
    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.value(self.b_r).len()
    }
}

/// Multi-head self-attention on `h` (`[B, T, D]`): project, attend with the
/// key-padding mask, concatenate heads, project out.
pub fn attention_block<S: Real>(
    tape: &mut Tape<'_, S>,
    h: Var,
    key_valid: &[bool],
    heads: usize,
    ids: &AttentionIds,
) -> Result<Var> {
    let d = *tape.shape(h).last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {d} not divisible by {heads} heads"
        )));
    }
    let p = |tape: &mut Tape<'_, S>, id| tape.param(id);
    let (wq, bq) = (p(tape, ids.wq), p(tape, ids.bq));
    let wk = p(tape, ids.wk);
    let (wv, bv) = (p(tape, ids.wv), p(tape, ids.bv));
    let (wo, bo) = (p(tape, ids.wo), p(tape, ids.bo));
    let q = tape.dense(h, wq, Some(bq))?;
    let k = tape.dense(h, wk, None)?;
    let v = tape.dense(h, wv, Some(bv))?;
    let a = tape.attention(q, k, v, key_valid, heads)?;
    tape.dense(a, wo, Some(bo))
}

/// Projections of the whole input sequence for the three GRU gates,
/// computed once before stepping through time.
pub struct GruInputs {
    r: Var,
    z: Var,
    h: Var,
}

impl GruInputs {
    /// Gate inputs `(xr, xz, xh)` at time step `t`, each `[B, H]`.
    pub fn steps<S: Real>(&self, tape: &mut Tape<'_, S>, t: usize) -> Result<(Var, Var, Var)> {
        Ok((tape.step(self.r, t)?, tape.step(self.z, t)?, tape.step(self.h, t)?))
    }
}

pub fn gru_project_inputs<S: Real>(tape: &mut Tape<'_, S>, x: Var, ids: &GruIds) -> Result<GruInputs> {
    let (w_r, b_r) = (tape.param(ids.w_r), tape.param(ids.b_r));
    let (w_z, b_z) = (tape.param(ids.w_z), tape.param(ids.b_z));
    let (w_h, b_h) = (tape.param(ids.w_h), tape.param(ids.b_h));
    Ok(GruInputs {
        r: tape.dense(x, w_r, Some(b_r))?,
        z: tape.dense(x, w_z, Some(b_z))?,
        h: tape.dense(x, w_h, Some(b_h))?,
    })
}

/// One GRU update given already projected input terms `xr, xz, xh`
/// (`W·x + b` for each gate):
///
/// ```text
/// r = σ(xr + U_r h)      z = σ(xz + U_z h)
/// h̃ = tanh(xh + U_h (r ∘ h))
/// h' = (1 − z) ∘ h + z ∘ h̃
/// ```
pub fn gru_update<S: Real>(
    tape: &mut Tape<'_, S>,
    xr: Var,
    xz: Var,
    xh: Var,
    h_prev: Var,
    ids: &GruIds,
) -> Result<Var> {
    let (u_r, u_z, u_h) = (tape.param(ids.u_r), tape.param(ids.u_z), tape.param(ids.u_h));
    let hr = tape.dense(h_prev, u_r, None)?;
    let pre_r = tape.add(xr, hr)?;
    let r = tape.sigmoid(pre_r);
    let hz = tape.dense(h_prev, u_z, None)?;
    let pre_z = tape.add(xz, hz)?;
    let z = tape.sigmoid(pre_z);
    let rh = tape.mul(r, h_prev)?;
    let hh = tape.dense(rh, u_h, None)?;
    let pre_h = tape.add(xh, hh)?;
    let cand = tape.tanh(pre_h);
    let keep = tape.affine(z, -1.0, 1.0);
    let old = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

/// Runs one GRU direction over `x` (`[B, T, F]`), skipping invalid steps
/// (state carried through unchanged). Returns the final state `[B, H]`.
pub fn gru_sequence<S: Real>(
    tape: &mut Tape<'_, S>,
    x: Var,
    valid: &[bool],
    ids: &GruIds,
    reverse: bool,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || valid.len() != s[0] * s[1] {
        return Err(Error::dim(format!(
            "gru: input {s:?} with {} mask flags",
            valid.len()
        )));
    }
    let (b, t) = (s[0], s[1]);
    let hidden = ids.hidden(tape.store());
    let proj = gru_project_inputs(tape, x, ids)?;
    let mut h = tape.constant(Tensor::zeros(&[b, hidden]));
    let order: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for ti in order {
        let flags: Vec<bool> = (0..b).map(|bi| valid[bi * t + ti]).collect();
        if !flags.iter().any(|&f| f) {
            continue;
        }
        let (xr, xz, xh) = proj.steps(tape, ti)?;
        let h_new = gru_update(tape, xr, xz, xh, h, ids)?;
        h = if flags.iter().all(|&f| f) {
            h_new
        } else {
            tape.select_rows(flags, h_new, h)?
        };
    }
    Ok(h)
}

/// Bidirectional GRU: `[h_fwd_final ; h_bwd_final]`, shape `[B, 2H]`.
pub fn bigru_block<S: Real>(
    tape: &mut Tape<'_, S>,
    x: Var,
    valid: &[bool],
    fwd: &GruIds,
    bwd: &GruIds,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() == 3 && valid.len() == s[0] * s[1] {
        for bi in 0..s[0] {
            if !valid[bi * s[1]..(bi + 1) * s[1]].iter().any(|&f| f) {
                return Err(Error::Degenerate(format!(
                    "sample {bi} has no unmasked step"
                )));
            }
        }
    }
    let hf = gru_sequence(tape, x, valid, fwd, false)?;
    let hb = gru_sequence(tape, x, valid, bwd, true)?;
    tape.concat(vec![hf, hb])
}

/// Inverted dropout: identity in eval mode or at rate 0.
pub fn dropout_var<S: Real>(tape: &mut Tape<'_, S>, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, mask)
}

// ---------------------------------------------------------------------------
// Tensor-level kernels.

fn with_tape<T>(f: impl FnOnce(&mut Tape<'_>) -> Result<T>) -> Result<T> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    f(&mut tape)
}

pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    with_tape(|tape| {
        let (x, w, b) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.dense(x, w, Some(b))?;
        Ok(tape.value(y).clone())
    })
}

/// Softmax over the last axis.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    with_tape(|tape| {
        let x = tape.constant(v.clone());
        let y = tape.softmax(x)?;
        Ok(tape.value(y).clone())
    })
}

/// Stored statistics for eval-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Batch normalization of `x` (`[B, T, D]`) over channel `D`. In train mode
/// statistics come from the positions where `step_valid` is true (one flag
/// per `(b, t)`) and `running` is updated in place.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    step_valid: &[bool],
    mode: Mode,
    running: &mut RunningStats,
    eps: f64,
    momentum: f64,
) -> Result<Tensor> {
    let d = gamma.len();
    let mut store = ParamStore::new();
    let mean_id = store.add_buffer("mean", Tensor::vector(running.mean.clone())?)?;
    let var_id = store.add_buffer("var", Tensor::vector(running.var.clone())?)?;
    let (out, updates) = {
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::new(vec![d], gamma.to_vec())?);
        let b = tape.constant(Tensor::new(vec![d], beta.to_vec())?);
        let stats = match mode {
            Mode::Train => NormStats::Batch {
                valid: Some(step_valid),
                momentum,
                running: Some((mean_id, var_id)),
            },
            Mode::Eval => NormStats::Running {
                mean: mean_id,
                var: var_id,
            },
        };
        let y = tape.batch_norm(xv, g, b, stats, eps)?;
        (tape.value(y).clone(), tape.take_stat_updates())
    };
    for u in &updates {
        u.apply(&mut store);
    }
    running.mean = store.value(mean_id).data().to_vec();
    running.var = store.value(var_id).data().to_vec();
    Ok(out)
}

pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    with_tape(|tape| {
        let d = gamma.len();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::new(vec![d], gamma.to_vec())?);
        let b = tape.constant(Tensor::new(vec![d], beta.to_vec())?);
        let y = tape.layer_norm(xv, g, b, eps)?;
        Ok(tape.value(y).clone())
    })
}

/// Weights of a multi-head attention sublayer as plain tensors.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionWeights {
    fn into_store(&self) -> Result<(ParamStore, AttentionIds)> {
        let mut s = ParamStore::new();
        let ids = AttentionIds {
            wq: s.add("wq", self.wq.clone())?,
            bq: s.add("bq", self.bq.clone())?,
            wk: s.add("wk", self.wk.clone())?,
            wv: s.add("wv", self.wv.clone())?,
            bv: s.add("bv", self.bv.clone())?,
            wo: s.add("wo", self.wo.clone())?,
            bo: s.add("bo", self.bo.clone())?,
        };
        Ok((s, ids))
    }
}

/// Multi-head self-attention. `key_valid` flags each `(b, t)`; padded keys
/// receive exactly zero weight.
pub fn multi_head_attention(
    h: &Tensor,
    key_valid: &[bool],
    n_heads: usize,
    weights: &AttentionWeights,
) -> Result<Tensor> {
    let (store, ids) = weights.into_store()?;
    let mut tape = Tape::new(&store);
    let x = tape.constant(h.clone());
    let y = attention_block(&mut tape, x, key_valid, n_heads, &ids)?;
    Ok(tape.value(y).clone())
}

/// Weights of one GRU direction as plain tensors. `w_*` are `[H, F]`,
/// `u_*` are `[H, H]`, biases `[H]`.
#[derive(Clone, Debug)]
pub struct GruWeights {
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_r: Tensor::zeros(&[hidden, input]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            b_r: Tensor::zeros(&[hidden]),
            w_z: Tensor::zeros(&[hidden, input]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            w_h: Tensor::zeros(&[hidden, input]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub(crate) fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<GruIds> {
        let mut add = |n: &str, t: &Tensor| store.add(&format!("{prefix}.{n}"), t.clone());
        Ok(GruIds {
            w_r: add("w_r", &self.w_r)?,
            u_r: add("u_r", &self.u_r)?,
            b_r: add("b_r", &self.b_r)?,
            w_z: add("w_z", &self.w_z)?,
            u_z: add("u_z", &self.u_z)?,
            b_z: add("b_z", &self.b_z)?,
            w_h: add("w_h", &self.w_h)?,
            u_h: add("u_h", &self.u_h)?,
            b_h: add("b_h", &self.b_h)?,
        })
    }
}

/// A single GRU step on one vector.
pub fn gru_cell(x_t: &[f64], h_prev: &[f64], weights: &GruWeights) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let ids = weights.register(&mut store, "gru")?;
    if weights.w_r.shape()[1] != x_t.len() || weights.b_r.len() != h_prev.len() {
        return Err(Error::dim(format!(
            "gru_cell: input {} / state {} against weights {:?}",
            x_t.len(),
            h_prev.len(),
            weights.w_r.shape()
        )));
    }
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::new(vec![1, x_t.len()], x_t.to_vec())?);
    let h = tape.constant(Tensor::new(vec![1, h_prev.len()], h_prev.to_vec())?);
    let proj = gru_project_inputs(&mut tape, x, &ids)?;
    let y = gru_update(&mut tape, proj.r, proj.z, proj.h, h, &ids)?;
    Ok(tape.value(y).data().to_vec())
}

/// Bidirectional GRU over `x` (`[B, T, F]`) returning `[B, 2H]`.
pub fn bidirectional_gru(
    x: &Tensor,
    step_valid: &[bool],
    fwd: &GruWeights,
    bwd: &GruWeights,
) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let f = fwd.register(&mut store, "fwd")?;
    let b = bwd.register(&mut store, "bwd")?;
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let y = bigru_block(&mut tape, xv, step_valid, &f, &b)?;
    Ok(tape.value(y).clone())
}

/// Row gather from `table` (`[V, E]`) for a `[B, T]` id matrix.
pub fn embedding_lookup(ids: &[usize], ids_shape: &[usize], table: &Tensor) -> Result<Tensor> {
    with_tape(|tape| {
        let t = tape.constant(table.clone());
        let y = tape.embedding(t, ids.to_vec(), ids_shape)?;
        Ok(tape.value(y).clone())
    })
}

pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    with_tape(|tape| {
        let v = tape.constant(x.clone());
        let y = dropout_var(tape, v, rate, mode, rng)?;
        Ok(tape.value(y).clone())
    })
}
