//! Comparison architectures: one BiGRU per feature (U-GRU), one BiGRU over
//! all features (M-GRU), and a layer-normalized Transformer encoder with
//! sinusoidal positions and mean pooling (TE).

use crate::data::schema::ROUND_TYPE;
use crate::error::Result;
use crate::numerics::layers::{bigru_block, dropout_var, GruIds};
use crate::numerics::{Mode, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

use super::batch::Batch;
use super::config::ModelConfig;
use super::encoder::{block, embed_steps, encoder_block, gru, softmax_head, weight, zeros, BlockIds, NormKind};

#[derive(Clone, Debug)]
pub struct UgruIds {
    pub embedding: ParamId,
    /// Forward and backward GRU per feature column, in column order.
    pub grus: Vec<(GruIds, GruIds)>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct MgruIds {
    pub embedding: ParamId,
    pub fwd: GruIds,
    pub bwd: GruIds,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct TeIds {
    pub embedding: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub blocks: Vec<BlockIds>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

pub(crate) fn init_ugru(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<UgruIds> {
    let h = cfg.ugru_hidden;
    let embedding = weight(store, rng, "embedding", &[cfg.vocab_size, cfg.embedding_dim])?;
    let grus = (0..cfg.n_features)
        .map(|k| {
            let input = if k == ROUND_TYPE { cfg.embedding_dim } else { 1 };
            Ok((
                gru(store, rng, &format!("gru{k}.fwd"), input, h)?,
                gru(store, rng, &format!("gru{k}.bwd"), input, h)?,
            ))
        })
        .collect::<Result<_>>()?;
    let w_out = weight(store, rng, "head.w", &[cfg.n_classes, cfg.n_features * 2 * h])?;
    let b_out = zeros(store, "head.b", cfg.n_classes)?;
    Ok(UgruIds {
        embedding,
        grus,
        w_out,
        b_out,
    })
}

pub(crate) fn init_mgru(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<MgruIds> {
    let h = cfg.gru_hidden;
    let embedding = weight(store, rng, "embedding", &[cfg.vocab_size, cfg.embedding_dim])?;
    let fwd = gru(store, rng, "gru.fwd", cfg.input_width(), h)?;
    let bwd = gru(store, rng, "gru.bwd", cfg.input_width(), h)?;
    let w_out = weight(store, rng, "head.w", &[cfg.n_classes, 2 * h])?;
    let b_out = zeros(store, "head.b", cfg.n_classes)?;
    Ok(MgruIds {
        embedding,
        fwd,
        bwd,
        w_out,
        b_out,
    })
}

pub(crate) fn init_te(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<TeIds> {
    let d = cfg.d_model;
    let embedding = weight(store, rng, "embedding", &[cfg.vocab_size, cfg.embedding_dim])?;
    let w_in = weight(store, rng, "input.w", &[d, cfg.input_width()])?;
    let b_in = zeros(store, "input.b", d)?;
    let blocks = (0..cfg.n_blocks)
        .map(|i| block(store, rng, &format!("block{i}"), cfg, NormKind::Layer))
        .collect::<Result<_>>()?;
    let w_out = weight(store, rng, "head.w", &[cfg.n_classes, d])?;
    let b_out = zeros(store, "head.b", cfg.n_classes)?;
    Ok(TeIds {
        embedding,
        w_in,
        b_in,
        blocks,
        w_out,
        b_out,
    })
}

pub(crate) fn ugru_forward<S: Real>(
    tape: &mut Tape<'_, S>,
    ids: &UgruIds,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(ids.grus.len());
    for (k, (fwd, bwd)) in ids.grus.iter().enumerate() {
        let x = if k == ROUND_TYPE {
            let table = tape.param(ids.embedding);
            tape.embedding(table, batch.category_ids(cfg.vocab_size)?, &[batch.b, batch.t])?
        } else {
            tape.constant(batch.column(k))
        };
        outs.push(bigru_block(tape, x, &batch.mask, fwd, bwd)?);
    }
    let h = tape.concat(outs)?;
    let h = dropout_var(tape, h, cfg.dropout, mode, rng)?;
    softmax_head(tape, h, ids.w_out, ids.b_out)
}

pub(crate) fn mgru_forward<S: Real>(
    tape: &mut Tape<'_, S>,
    ids: &MgruIds,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let x = embed_steps(tape, batch, ids.embedding, cfg)?;
    let h = bigru_block(tape, x, &batch.mask, &ids.fwd, &ids.bwd)?;
    let h = dropout_var(tape, h, cfg.dropout, mode, rng)?;
    softmax_head(tape, h, ids.w_out, ids.b_out)
}

/// `pe[t, 2i] = sin(t / 10000^(2i/D))`, `pe[t, 2i+1] = cos(…)`.
pub fn sinusoidal_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape")
}

pub(crate) fn te_forward<S: Real>(
    tape: &mut Tape<'_, S>,
    ids: &TeIds,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let x = embed_steps(tape, batch, ids.embedding, cfg)?;
    let (w, b) = (tape.param(ids.w_in), tape.param(ids.b_in));
    let h = tape.dense(x, w, Some(b))?;
    let pe = tape.constant(sinusoidal_encoding(batch.t, cfg.d_model));
    let mut cur = tape.add(h, pe)?;
    for bl in &ids.blocks {
        cur = encoder_block(tape, cur, &batch.mask, cfg, bl, mode, rng)?;
    }
    let pooled = tape.masked_mean(cur, &batch.mask)?;
    let pooled = dropout_var(tape, pooled, cfg.dropout, mode, rng)?;
    softmax_head(tape, pooled, ids.w_out, ids.b_out)
}
