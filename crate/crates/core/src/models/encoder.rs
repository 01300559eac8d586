//! Parameter initialization helpers and the post-norm encoder block shared
//! by TMTSC (batch norm) and the TE baseline (layer norm).

use crate::error::Result;
use crate::numerics::layers::{attention_block, dropout_var, AttentionIds, GruIds};
use crate::numerics::{Mode, NormStats, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

use super::batch::Batch;
use super::config::ModelConfig;

pub const INIT_STD: f64 = 0.02;

pub(crate) fn weight(store: &mut ParamStore, rng: &mut Rng, name: &str, shape: &[usize]) -> Result<ParamId> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(0.0, INIT_STD)).collect();
    store.add(name, Tensor::new(shape.to_vec(), data)?)
}

pub(crate) fn zeros(store: &mut ParamStore, name: &str, n: usize) -> Result<ParamId> {
    store.add(name, Tensor::zeros(&[n]))
}

pub(crate) fn gru(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) -> Result<GruIds> {
    let mut w = |g: &str| weight(store, rng, &format!("{prefix}.w_{g}"), &[hidden, input]);
    let (w_r, w_z, w_h) = (w("r")?, w("z")?, w("h")?);
    let mut u = |g: &str| weight(store, rng, &format!("{prefix}.u_{g}"), &[hidden, hidden]);
    let (u_r, u_z, u_h) = (u("r")?, u("z")?, u("h")?);
    let mut b = |g: &str| zeros(store, &format!("{prefix}.b_{g}"), hidden);
    let (b_r, b_z, b_h) = (b("r")?, b("z")?, b("h")?);
    Ok(GruIds {
        w_r,
        u_r,
        b_r,
        w_z,
        u_z,
        b_z,
        w_h,
        u_h,
        b_h,
    })
}

/// Scalars in one GRU direction with the given widths.
pub fn gru_param_count(input: usize, hidden: usize) -> usize {
    3 * (hidden * input + hidden * hidden + hidden)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Running mean and variance, batch norm only.
    pub running: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub attn: AttentionIds,
    pub norm1: NormIds,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub norm2: NormIds,
    pub kind: NormKind,
}

fn norm(store: &mut ParamStore, prefix: &str, d: usize, kind: NormKind) -> Result<NormIds> {
    let gamma = store.add(&format!("{prefix}.gamma"), Tensor::full(&[d], 1.0))?;
    let beta = zeros(store, &format!("{prefix}.beta"), d)?;
    let running = match kind {
        NormKind::Batch => Some((
            store.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[d]))?,
            store.add_buffer(&format!("{prefix}.running_var"), Tensor::full(&[d], 1.0))?,
        )),
        NormKind::Layer => None,
    };
    Ok(NormIds { gamma, beta, running })
}

pub(crate) fn block(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    cfg: &ModelConfig,
    kind: NormKind,
) -> Result<BlockIds> {
    let (d, f) = (cfg.d_model, cfg.ff_dim);
    let a = |s: &str| format!("{prefix}.attn.{s}");
    let attn = AttentionIds {
        wq: weight(store, rng, &a("wq"), &[d, d])?,
        bq: zeros(store, &a("bq"), d)?,
        wk: weight(store, rng, &a("wk"), &[d, d])?,
        wv: weight(store, rng, &a("wv"), &[d, d])?,
        bv: zeros(store, &a("bv"), d)?,
        wo: weight(store, rng, &a("wo"), &[d, d])?,
        bo: zeros(store, &a("bo"), d)?,
    };
    let norm1 = norm(store, &format!("{prefix}.norm1"), d, kind)?;
    let ff_w1 = weight(store, rng, &format!("{prefix}.ff.w1"), &[f, d])?;
    let ff_b1 = zeros(store, &format!("{prefix}.ff.b1"), f)?;
    let ff_w2 = weight(store, rng, &format!("{prefix}.ff.w2"), &[d, f])?;
    let ff_b2 = zeros(store, &format!("{prefix}.ff.b2"), d)?;
    let norm2 = norm(store, &format!("{prefix}.norm2"), d, kind)?;
    Ok(BlockIds {
        attn,
        norm1,
        ff_w1,
        ff_b1,
        ff_w2,
        ff_b2,
        norm2,
        kind,
    })
}

fn apply_norm<S: Real>(
    tape: &mut Tape<'_, S>,
    x: Var,
    mask: &[bool],
    ids: &NormIds,
    kind: NormKind,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<Var> {
    let (g, b) = (tape.param(ids.gamma), tape.param(ids.beta));
    match (kind, mode, ids.running) {
        (NormKind::Layer, _, _) => tape.layer_norm(x, g, b, cfg.norm_eps),
        (NormKind::Batch, Mode::Eval, Some((mean, var))) => {
            tape.batch_norm(x, g, b, NormStats::Running { mean, var }, cfg.norm_eps)
        }
        (NormKind::Batch, _, running) => tape.batch_norm(
            x,
            g,
            b,
            NormStats::Batch {
                valid: Some(mask),
                momentum: cfg.bn_momentum,
                running,
            },
            cfg.norm_eps,
        ),
    }
}

/// attention → dropout → residual → norm → feed-forward (rectifier) →
/// dropout → residual → norm, on `h` of shape `[B, T, D]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encoder_block<S: Real>(
    tape: &mut Tape<'_, S>,
    h: Var,
    mask: &[bool],
    cfg: &ModelConfig,
    ids: &BlockIds,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let a = attention_block(tape, h, mask, cfg.n_heads, &ids.attn)?;
    let a = dropout_var(tape, a, cfg.dropout, mode, rng)?;
    let r = tape.add(h, a)?;
    let h1 = apply_norm(tape, r, mask, &ids.norm1, ids.kind, cfg, mode)?;
    let (w1, b1) = (tape.param(ids.ff_w1), tape.param(ids.ff_b1));
    let (w2, b2) = (tape.param(ids.ff_w2), tape.param(ids.ff_b2));
    let f = tape.dense(h1, w1, Some(b1))?;
    let f = tape.relu(f);
    let f = tape.dense(f, w2, Some(b2))?;
    let f = dropout_var(tape, f, cfg.dropout, mode, rng)?;
    let r = tape.add(h1, f)?;
    apply_norm(tape, r, mask, &ids.norm2, ids.kind, cfg, mode)
}

/// Splits each step into numeric values and the round-type id, embeds the
/// id and concatenates: `[B, T, K′]`.
pub(crate) fn embed_steps<S: Real>(
    tape: &mut Tape<'_, S>,
    batch: &Batch,
    table: ParamId,
    cfg: &ModelConfig,
) -> Result<Var> {
    let ids = batch.category_ids(cfg.vocab_size)?;
    let u = tape.constant(batch.numeric());
    let table = tape.param(table);
    let e = tape.embedding(table, ids, &[batch.b, batch.t])?;
    tape.concat(vec![u, e])
}

/// Dense head on `[B, F]` features followed by softmax.
pub(crate) fn softmax_head<S: Real>(tape: &mut Tape<'_, S>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (tape.param(w), tape.param(b));
    let logits = tape.dense(x, w, Some(b))?;
    tape.softmax(logits)
}
