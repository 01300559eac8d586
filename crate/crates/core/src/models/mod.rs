//! The four classifiers as forward functions over a [`ParamStore`].
//!
//! Every forward pass is generic over the tape's scalar type so the same
//! graph serves training (`f64`) and extended-precision gradient checks.

pub mod baselines;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod tmtsc;

pub use batch::Batch;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, ModelKind};
pub use tmtsc::ForwardTrace;

use crate::data::CompanyPanel;
use crate::error::{Error, Result};
use crate::numerics::{Mode, Objective, ParamStore, Real, Rng, Tape, Tensor, Var};

use baselines::{MgruIds, TeIds, UgruIds};
use tmtsc::TmtscIds;

#[derive(Clone, Debug)]
pub enum Architecture {
    Tmtsc(TmtscIds),
    Ugru(UgruIds),
    Mgru(MgruIds),
    Te(TeIds),
}

/// A model: its kind, hyperparameters, parameters and parameter handles.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub arch: Architecture,
}

/// Probability clamp applied inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

impl Model {
    /// Weights `N(0, 0.02²)`, biases 0, norm scale 1 and shift 0, running
    /// mean 0 and variance 1.
    pub fn init(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let arch = match kind {
            ModelKind::Tmtsc => Architecture::Tmtsc(tmtsc::init(&mut store, &config, &mut rng)?),
            ModelKind::Ugru => Architecture::Ugru(baselines::init_ugru(&mut store, &config, &mut rng)?),
            ModelKind::Mgru => Architecture::Mgru(baselines::init_mgru(&mut store, &config, &mut rng)?),
            ModelKind::Te => Architecture::Te(baselines::init_te(&mut store, &config, &mut rng)?),
        };
        Ok(Self {
            kind,
            config,
            store,
            arch,
        })
    }

    /// Class probabilities `[B, 2]`.
    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let cfg = &self.config;
        match &self.arch {
            Architecture::Tmtsc(ids) => Ok(tmtsc::trace(tape, ids, cfg, batch, mode, rng)?.y_hat),
            Architecture::Ugru(ids) => baselines::ugru_forward(tape, ids, cfg, batch, mode, rng),
            Architecture::Mgru(ids) => baselines::mgru_forward(tape, ids, cfg, batch, mode, rng),
            Architecture::Te(ids) => baselines::te_forward(tape, ids, cfg, batch, mode, rng),
        }
    }

    /// Full TMTSC trace; an error for the baselines.
    pub fn trace<S: Real>(
        &self,
        tape: &mut Tape<'_, S>,
        batch: &Batch,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardTrace> {
        match &self.arch {
            Architecture::Tmtsc(ids) => tmtsc::trace(tape, ids, &self.config, batch, mode, rng),
            _ => Err(Error::Config(format!("{} has no TMTSC trace", self.kind))),
        }
    }

    /// Mean binary cross-entropy of the batch, each sample weighted by
    /// `pos_weight` if positive and 1 otherwise.
    pub fn loss<S: Real>(
        &self,
        tape: &mut Tape<'_, S>,
        batch: &Batch,
        mode: Mode,
        rng: &mut Rng,
        pos_weight: f64,
    ) -> Result<Var> {
        let probs = self.forward(tape, batch, mode, rng)?;
        let weights: Vec<f64> = batch
            .labels
            .iter()
            .map(|&y| if y == 1.0 { pos_weight } else { 1.0 })
            .collect();
        tape.bce(probs, &batch.labels, &weights, PROB_CLAMP)
    }

    /// Eval-mode probabilities.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let mut rng = Rng::new(0);
        let y = self.forward(&mut tape, batch, Mode::Eval, &mut rng)?;
        Ok(tape.value(y).clone())
    }

    /// Class-1 probabilities for every panel, in order.
    pub fn scores(&self, panels: &[CompanyPanel], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(panels.len());
        for chunk in panels.chunks(batch_size.max(1)) {
            let p = self.predict(&Batch::from_panels(chunk)?)?;
            out.extend(p.data().chunks(2).map(|r| r[1]));
        }
        Ok(out)
    }

    /// Number of learnable scalars; running statistics are excluded.
    pub fn count_params(&self) -> usize {
        self.store.count_trainable()
    }
}

/// Eval-mode loss of a fixed batch, for gradient checking.
pub struct BatchLoss<'m> {
    pub model: &'m Model,
    pub batch: &'m Batch,
}

impl Objective for BatchLoss<'_> {
    fn loss<S: Real>(&self, tape: &mut Tape<'_, S>) -> Result<Var> {
        let mut rng = Rng::new(0);
        self.model.loss(tape, self.batch, Mode::Eval, &mut rng, 1.0)
    }
}
