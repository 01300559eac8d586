//! wasm-bindgen bindings behind `www/index.html`.
//!
//! A [`Demo`] holds one synthetic dataset and, once trained, one model's
//! test scores. Every method returns a JSON string for the page to render.

use serde::Serialize;
use tmtsc_core::data::{prepare, CompanyPanel, PreparedData, SplitFractions, Task};
use tmtsc_core::evaluation::{accuracy_precision, auc_roc, roc_curve, RocPoint};
use tmtsc_core::models::{Model, ModelConfig, ModelKind};
use tmtsc_core::portfolio::{simulate, ModelScores, SimConfig, SimRow};
use tmtsc_core::synthetic::{bayes_auc, generate, SynthConfig, LABEL_SCALE};
use tmtsc_core::training::{fit, TrainConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct DatasetSummary {
    companies: usize,
    train: usize,
    validation: usize,
    test: usize,
    positive_rate: f64,
    mean_months: f64,
    categories: usize,
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    epochs: usize,
    selected_epoch: usize,
    losses: Vec<f64>,
    test_auc: f64,
    accuracy: f64,
    precision: Option<f64>,
    roc: Vec<RocPoint>,
}

#[wasm_bindgen]
pub struct Demo {
    data: PreparedData,
    scores: Option<ModelScores>,
}

fn valid_months(p: &CompanyPanel) -> usize {
    p.mask.iter().filter(|&&m| m).count()
}

#[wasm_bindgen]
impl Demo {
    /// Generates `n_companies` and splits them 70/15/15 by investor group.
    #[wasm_bindgen(constructor)]
    pub fn new(n_companies: usize, signal_strength: f64, seed: u64) -> Result<Demo, JsError> {
        let records = generate(&SynthConfig {
            n_companies,
            signal_strength,
            seed,
            ..Default::default()
        })
        .map_err(js_err)?;
        let fractions = SplitFractions::new(0.7, 0.15, 0.15).map_err(js_err)?;
        let data = prepare(records, Task::Vc, fractions, seed).map_err(js_err)?;
        Ok(Demo { data, scores: None })
    }

    pub fn summary(&self) -> Result<String, JsError> {
        let s = &self.data.split;
        let all: Vec<&CompanyPanel> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        let n = all.len().max(1) as f64;
        to_json(&DatasetSummary {
            companies: all.len(),
            train: s.train.len(),
            validation: s.validation.len(),
            test: s.test.len(),
            positive_rate: all.iter().filter(|p| p.y == 1).count() as f64 / n,
            mean_months: all.iter().map(|p| valid_months(p) as f64).sum::<f64>() / n,
            categories: self.data.vocab.size(),
        })
    }

    /// Trains a small `model` ("ugru", "mgru", "te" or "tmtsc") and scores
    /// the test split.
    pub fn train(&mut self, model: &str, epochs: usize, seed: u64) -> Result<String, JsError> {
        let kind: ModelKind = model.parse().map_err(js_err)?;
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            ff_dim: 16,
            gru_hidden: 8,
            vocab_size: self.data.vocab.size(),
            ..Default::default()
        };
        let mut m = Model::init(kind, cfg, seed).map_err(js_err)?;
        let tc = TrainConfig {
            batch_size: 64,
            max_epochs: epochs,
            seed,
            ..Default::default()
        };
        let s = &self.data.split;
        let report = fit(&mut m, &s.train, &s.validation, &tc).map_err(js_err)?;
        let scores = m.scores(&s.test, 256).map_err(js_err)?;
        let labels = self.test_labels();
        let ap = accuracy_precision(&scores, &labels, 0.5).map_err(js_err)?;
        let summary = TrainSummary {
            model: kind.display_name().into(),
            epochs: report.epochs.len(),
            selected_epoch: report.selected_epoch,
            losses: report.losses(),
            test_auc: auc_roc(&scores, &labels).map_err(js_err)?,
            accuracy: ap.accuracy,
            precision: ap.precision,
            roc: roc_curve(&scores, &labels).map_err(js_err)?,
        };
        self.scores = Some(ModelScores {
            model: summary.model.clone(),
            scores,
        });
        to_json(&summary)
    }

    /// Portfolio success rates of the last trained model; `sizes` is
    /// comma-separated.
    pub fn simulate(&self, sizes: &str, repeats: usize, seed: u64) -> Result<String, JsError> {
        let scores = self.scores.as_ref().ok_or_else(|| JsError::new("train a model first"))?;
        let portfolio_sizes = sizes
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(js_err)?;
        let cfg = SimConfig {
            portfolio_sizes,
            n_repeats: repeats,
            seed,
            ..Default::default()
        };
        let r = simulate(std::slice::from_ref(scores), &self.test_labels(), &cfg).map_err(js_err)?;
        let rows: Vec<SimRow> = r.summary();
        to_json(&rows)
    }

    /// Highest test AUC any classifier can reach on this generator.
    pub fn bayes_auc(signal_strength: f64) -> f64 {
        bayes_auc(signal_strength * LABEL_SCALE, SynthConfig::default().class_balance_vc)
    }
}

impl Demo {
    fn test_labels(&self) -> Vec<u8> {
        self.data.split.test.iter().map(|p| p.y).collect()
    }
}
