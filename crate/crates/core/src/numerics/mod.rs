//! Tensor math, reverse-mode differentiation and gradient checking.

pub mod dd;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective, ParamCheck};
pub use layers::{
    batch_norm, bidirectional_gru, dense, dropout, embedding_lookup, gru_cell, layer_norm,
    multi_head_attention, softmax, AttentionWeights, GruWeights, RunningStats,
};
pub use dd::Dd;
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Mode, NormStats, Tape, Var};
pub use tensor::Tensor;
