//! Loss, optimizer, training loop and per-step timing.

use std::path::Path;
use web_time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{CompanyPanel, Task};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy_precision, auc_roc, DEFAULT_THRESHOLD};
use crate::models::{Batch, Model, ModelKind, PROB_CLAMP};
use crate::numerics::{Mode, ParamStore, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub task: Task,
    /// Loss weight of positive samples; 1 when unset.
    pub pos_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 10,
            seed: 0,
            task: Task::Vc,
            pos_weight: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment coefficients must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("pos_weight must be positive");
            }
        }
        Ok(())
    }
}

/// Reads a TOML or JSON file; the format is picked by extension, anything
/// other than `.json` is read as TOML.
pub fn read_config<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Mean binary cross-entropy of the class-1 column of `y_hat`, clamped to
/// `[1e-12, 1 − 1e-12]` before the logarithm.
pub fn bce_loss(y_hat: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    if y_hat.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if let Some(row) = y_hat.iter().find(|r| (r[0] + r[1] - 1.0).abs() > 1e-9) {
        return Err(Error::Precondition(format!("probability row {row:?} does not sum to 1")));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let p = tape.constant(Tensor::new(vec![y_hat.len(), 2], y_hat.concat())?);
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let loss = tape.bce(p, &y, &vec![1.0; y.len()], PROB_CLAMP)?;
    Ok(tape.value(loss).data()[0])
}

/// Adaptive-moment optimizer over the trainable entries of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub task: Task,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub selected_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub stopped_early: bool,
    pub n_steps: usize,
    /// Wall-clock mean; left out of the JSON so reruns are byte-identical.
    #[serde(skip)]
    pub seconds_per_step: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Forward, backward and one optimizer step on `batch`. Returns the loss.
fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, rng: &mut Rng, pos_weight: f64) -> Result<f64> {
    let (loss, grads, stats) = {
        let mut tape = Tape::new(&model.store);
        let loss = model.loss(&mut tape, batch, Mode::Train, rng, pos_weight)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        (value, tape.backward(loss)?, tape.take_stat_updates())
    };
    model.store.zero_grad();
    model.store.accumulate(grads);
    adam.step(&mut model.store);
    for s in &stats {
        s.apply(&mut model.store);
    }
    Ok(loss)
}

fn validation_metrics(model: &Model, val: &[CompanyPanel], batch_size: usize) -> Result<Option<(f64, f64, Option<f64>)>> {
    if val.is_empty() {
        return Ok(None);
    }
    let scores = model.scores(val, batch_size)?;
    let labels: Vec<u8> = val.iter().map(|p| p.y).collect();
    let auc = match auc_roc(&scores, &labels) {
        Ok(a) => a,
        Err(Error::UndefinedMetric(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let ap = accuracy_precision(&scores, &labels, DEFAULT_THRESHOLD)?;
    Ok(Some((auc, ap.accuracy, ap.precision)))
}

/// Mini-batch training with per-epoch validation.
///
/// The model ends up holding the parameters of the epoch with the highest
/// validation AUC-ROC. Without a usable validation set (empty, or a single
/// class) there is no early stopping and the final epoch is kept.
pub fn fit(model: &mut Model, train: &[CompanyPanel], val: &[CompanyPanel], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Degenerate("no training panels".into()));
    }
    let pos_weight = cfg.pos_weight.unwrap_or(1.0);
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.derive(1);
    let mut dropout_rng = root.derive(2);
    let mut adam = Adam::new(&model.store, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut n_steps = 0;
    let mut step_seconds = 0.0;
    let mut warned = false;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_panels(chunk.iter().map(|&i| &train[i]))?;
            let start = Instant::now();
            let loss = match train_step(model, &mut adam, &batch, &mut dropout_rng, pos_weight) {
                // a non-finite activation upstream of the loss
                Err(Error::NumericInput(_)) => f64::NAN,
                other => other?,
            };
            step_seconds += start.elapsed().as_secs_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            n_steps += 1;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let metrics = validation_metrics(model, val, cfg.batch_size)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_auc: metrics.map(|m| m.0),
            val_accuracy: metrics.map(|m| m.1),
            val_precision: metrics.and_then(|m| m.2),
        });
        log::debug!("{} epoch {epoch}: loss {train_loss:.5} val auc {:?}", model.kind, metrics.map(|m| m.0));

        let Some((auc, ..)) = metrics else {
            if !warned {
                log::warn!("no usable validation set; keeping final-epoch parameters");
                warned = true;
            }
            continue;
        };
        if best.as_ref().is_none_or(|b| auc > b.0) {
            best = Some((auc, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (selected_epoch, best_val_auc) = match best {
        Some((auc, epoch, store)) => {
            model.store = store;
            (epoch, Some(auc))
        }
        None => (epochs.len(), None),
    };
    Ok(TrainReport {
        model: model.kind,
        task: cfg.task,
        seed: cfg.seed,
        epochs,
        selected_epoch,
        best_val_auc,
        stopped_early,
        n_steps,
        seconds_per_step: if n_steps > 0 { step_seconds / n_steps as f64 } else { 0.0 },
    })
}

const WARMUP_STEPS: usize = 3;

/// Median wall-clock seconds of one optimization step on `batch`, after
/// three untimed warm-up steps. Works on a copy of the model.
pub fn benchmark_step_time(model: &Model, batch: &Batch, n_steps: usize) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    let mut model = model.clone();
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(&model.store, &cfg);
    let mut rng = Rng::new(0);
    let mut times = Vec::with_capacity(n_steps);
    for i in 0..WARMUP_STEPS + n_steps {
        let start = Instant::now();
        train_step(&mut model, &mut adam, batch, &mut rng, 1.0)?;
        if i >= WARMUP_STEPS {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub seconds_per_step: f64,
    pub relative_time: f64,
}

/// Rows in the order U-GRU, M-GRU, TE, TMTSC, each time divided by the
/// fastest one.
pub fn relative_time_table(times: &[(ModelKind, f64)]) -> Vec<BenchRow> {
    let fastest = times.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    ModelKind::ALL
        .iter()
        .filter_map(|k| times.iter().find(|t| t.0 == *k))
        .map(|&(k, s)| BenchRow {
            model: k.display_name().to_string(),
            seconds_per_step: s,
            relative_time: s / fastest,
        })
        .collect()
}

pub fn write_bench_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_steps_match_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        let g = 2.0;
        store.get_mut(id).grad = Tensor::new(vec![1], vec![g]).unwrap();
        adam.step(&mut store);
        // bias-corrected moments equal g and g² after one step
        let expected = 0.5 - 0.1 * g / (g.abs() + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-12);

        adam.step(&mut store);
        let (m, v) = (0.9 * 0.1 * g + 0.1 * g, 0.999 * 0.001 * g * g + 0.001 * g * g);
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        let expected = expected - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn relative_times_are_ordered_and_normalized() {
        let rows = relative_time_table(&[
            (ModelKind::Tmtsc, 4.0),
            (ModelKind::Mgru, 2.0),
            (ModelKind::Te, 3.0),
            (ModelKind::Ugru, 8.0),
        ]);
        let names: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["U-GRU", "M-GRU", "TE", "TMTSC"]);
        assert_eq!(rows[1].relative_time, 1.0);
        assert_eq!(rows[0].relative_time, 4.0);
    }

    #[test]
    fn config_rejects_zero_batch() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
