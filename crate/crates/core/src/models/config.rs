use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{N_FEATURES, SEQ_LEN};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ugru,
    Mgru,
    Te,
    Tmtsc,
}

impl ModelKind {
    /// Table order: U-GRU, M-GRU, TE, TMTSC.
    pub const ALL: [ModelKind; 4] = [ModelKind::Ugru, ModelKind::Mgru, ModelKind::Te, ModelKind::Tmtsc];

    pub fn display_name(&self) -> &'static str {
        match self {
            ModelKind::Ugru => "U-GRU",
            ModelKind::Mgru => "M-GRU",
            ModelKind::Te => "TE",
            ModelKind::Tmtsc => "TMTSC",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ugru => "ugru",
            ModelKind::Mgru => "mgru",
            ModelKind::Te => "te",
            ModelKind::Tmtsc => "tmtsc",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "ugru" => Ok(ModelKind::Ugru),
            "mgru" => Ok(ModelKind::Mgru),
            "te" => Ok(ModelKind::Te),
            "tmtsc" => Ok(ModelKind::Tmtsc),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Hyperparameters shared by the four architectures. Each model reads the
/// fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Model dimension D of the Transformer variants.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Width E of the round-type embedding.
    pub embedding_dim: usize,
    pub seq_len: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Round-type vocabulary size, reserved ids included.
    pub vocab_size: usize,
    /// Hidden width of the single M-GRU BiGRU.
    pub gru_hidden: usize,
    /// Hidden width of each per-feature U-GRU BiGRU.
    pub ugru_hidden: usize,
    pub bn_momentum: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            ff_dim: 128,
            dropout: 0.1,
            embedding_dim: 8,
            seq_len: SEQ_LEN,
            n_features: N_FEATURES,
            n_classes: 2,
            vocab_size: 14,
            gru_hidden: 64,
            ugru_hidden: 8,
            bn_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Width K′ of one embedded input step: the numeric features plus the
    /// round-type embedding.
    pub fn input_width(&self) -> usize {
        self.n_features - 1 + self.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes != 2 {
            return bad(format!("n_classes must be 2, got {}", self.n_classes));
        }
        if self.n_features != N_FEATURES {
            return bad(format!("n_features must be {N_FEATURES}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("ff_dim", self.ff_dim),
            ("embedding_dim", self.embedding_dim),
            ("seq_len", self.seq_len),
            ("gru_hidden", self.gru_hidden),
            ("ugru_hidden", self.ugru_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must cover the two reserved ids".into());
        }
        Ok(())
    }
}
