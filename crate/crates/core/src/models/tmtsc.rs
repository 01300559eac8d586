//! The Transformer classifier: embedded inputs projected to D, learnable
//! positional encodings, batch-normalized encoder blocks and a head over
//! the concatenation of every step's output.

use crate::error::{Error, Result};
use crate::numerics::{Mode, ParamId, ParamStore, Real, Rng, Tape, Var};

use super::batch::Batch;
use super::config::ModelConfig;
use super::encoder::{block, embed_steps, encoder_block, softmax_head, weight, zeros, BlockIds, NormKind};

#[derive(Clone, Debug)]
pub struct TmtscIds {
    pub embedding: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

pub(crate) fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<TmtscIds> {
    let (d, t) = (cfg.d_model, cfg.seq_len);
    let embedding = weight(store, rng, "embedding", &[cfg.vocab_size, cfg.embedding_dim])?;
    let w_in = weight(store, rng, "input.w", &[d, cfg.input_width()])?;
    let b_in = zeros(store, "input.b", d)?;
    let pos = weight(store, rng, "pos", &[t, d])?;
    let blocks = (0..cfg.n_blocks)
        .map(|i| block(store, rng, &format!("block{i}"), cfg, NormKind::Batch))
        .collect::<Result<_>>()?;
    let w_out = weight(store, rng, "head.w", &[cfg.n_classes, t * d])?;
    let b_out = zeros(store, "head.b", cfg.n_classes)?;
    Ok(TmtscIds {
        embedding,
        w_in,
        b_in,
        pos,
        blocks,
        w_out,
        b_out,
    })
}

/// Intermediate values of one forward pass, as tape variables.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Embedded inputs `[B, T, K′]`.
    pub x_prime: Var,
    /// Projected inputs `[B, T, D]`.
    pub h: Var,
    /// `h` plus positional encodings.
    pub h_prime: Var,
    pub blocks: Vec<Var>,
    /// Last block output with padded steps zeroed, `[B, T·D]`.
    pub z: Var,
    pub y_hat: Var,
}

pub(crate) fn trace<S: Real>(
    tape: &mut Tape<'_, S>,
    ids: &TmtscIds,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardTrace> {
    if batch.t != cfg.seq_len {
        return Err(Error::dim(format!(
            "TMTSC expects {} steps, batch has {}",
            cfg.seq_len, batch.t
        )));
    }
    let x_prime = embed_steps(tape, batch, ids.embedding, cfg)?;
    let (w, b) = (tape.param(ids.w_in), tape.param(ids.b_in));
    let h = tape.dense(x_prime, w, Some(b))?;
    let p = tape.param(ids.pos);
    let h_prime = tape.add(h, p)?;
    let mut cur = h_prime;
    let mut blocks = Vec::with_capacity(ids.blocks.len());
    for bl in &ids.blocks {
        cur = encoder_block(tape, cur, &batch.mask, cfg, bl, mode, rng)?;
        blocks.push(cur);
    }
    let zeroed = tape.mul_const(cur, batch.step_multipliers(cfg.d_model))?;
    let z = tape.reshape(zeroed, vec![batch.b, cfg.seq_len * cfg.d_model])?;
    let y_hat = softmax_head(tape, z, ids.w_out, ids.b_out)?;
    Ok(ForwardTrace {
        x_prime,
        h,
        h_prime,
        blocks,
        z,
        y_hat,
    })
}
