//! Monte-Carlo portfolio simulation over the positively labeled test pool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_THRESHOLD;
use crate::numerics::Rng;

/// Reported success rate of the GC model on its own data. Plot overlay
/// only; nothing here reproduces it.
pub const GC_REFERENCE_RATE: f64 = 0.863;

/// A labeled horizontal line (or single point, with a size) for plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub label: String,
    pub portfolio_size: Option<usize>,
    pub success_rate: f64,
}

impl ReferenceLine {
    pub fn gc_reference() -> Self {
        Self {
            label: "GC reference".into(),
            portfolio_size: None,
            success_rate: GC_REFERENCE_RATE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub portfolio_sizes: Vec<usize>,
    pub n_repeats: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Reuse each repeat's company draw for every model.
    pub paired: bool,
    pub references: Vec<ReferenceLine>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            portfolio_sizes: vec![10, 25, 50, 100],
            n_repeats: 100,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            paired: true,
            references: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.portfolio_sizes.contains(&0) {
            return Err(Error::Config("portfolio sizes must be at least 1".into()));
        }
        if self.n_repeats == 0 {
            return Err(Error::Config("n_repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// One model's class-1 scores over the test companies.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelScores {
    pub model: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeResult {
    pub model: String,
    pub portfolio_size: usize,
    pub mean: f64,
    pub std: f64,
    pub raw: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Ordered by model (input order), then size (config order).
    pub rows: Vec<SizeResult>,
    pub references: Vec<ReferenceLine>,
}

/// For each size and repeat, draws companies uniformly without replacement
/// from the positively labeled pool and records the fraction each model
/// scores at or above the threshold.
pub fn simulate(models: &[ModelScores], labels: &[u8], config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    for m in models {
        if m.scores.len() != labels.len() {
            return Err(Error::dim(format!(
                "{}: {} scores for {} labels",
                m.model,
                m.scores.len(),
                labels.len()
            )));
        }
    }
    if let Some(&size) = config.portfolio_sizes.iter().find(|&&s| s > pool.len()) {
        return Err(Error::InfeasibleSize { size, pool: pool.len() });
    }

    let root = Rng::new(config.seed);
    let n_sizes = config.portfolio_sizes.len() as u64;
    let mut raw = vec![vec![Vec::with_capacity(config.n_repeats); config.portfolio_sizes.len()]; models.len()];
    for (si, &size) in config.portfolio_sizes.iter().enumerate() {
        for r in 0..config.n_repeats as u64 {
            let stream = si as u64 * config.n_repeats as u64 + r;
            let shared = config.paired.then(|| root.derive(stream).sample_indices(pool.len(), size));
            for (mi, m) in models.iter().enumerate() {
                let own;
                let picks = match &shared {
                    Some(p) => p,
                    None => {
                        let unpaired = (mi as u64 + 1) * n_sizes * config.n_repeats as u64 + stream;
                        own = root.derive(unpaired).sample_indices(pool.len(), size);
                        &own
                    }
                };
                let hits = picks
                    .iter()
                    .filter(|&&k| m.scores[pool[k]] >= config.threshold)
                    .count();
                raw[mi][si].push(hits as u64);
            }
        }
    }

    let mut rows = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        for (si, &size) in config.portfolio_sizes.iter().enumerate() {
            let hits = &raw[mi][si];
            let (mean, std) = hit_moments(hits, size);
            rows.push(SizeResult {
                model: m.model.clone(),
                portfolio_size: size,
                mean,
                std,
                raw: hits.iter().map(|&h| h as f64 / size as f64).collect(),
            });
        }
    }
    Ok(SimResult {
        rows,
        references: config.references.clone(),
    })
}

/// Mean and sample standard deviation of `hits / size`, from exact integer
/// sums so identical repeats give exactly their rate and a zero spread.
fn hit_moments(hits: &[u64], size: usize) -> (f64, f64) {
    let r = hits.len() as u128;
    let sum: u128 = hits.iter().map(|&h| h as u128).sum();
    let sq: u128 = hits.iter().map(|&h| (h as u128).pow(2)).sum();
    let mean = sum as f64 / (r * size as u128) as f64;
    if r < 2 {
        return (mean, 0.0);
    }
    // r·Σh² − (Σh)² = r(r−1)·s²
    let num = r * sq - sum * sum;
    let std = (num as f64 / (r * (r - 1)) as f64).sqrt() / size as f64;
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub model: String,
    pub portfolio_size: usize,
    pub mean: f64,
    pub std: f64,
}

/// Header `model,portfolio_size,mean,std`, one row per (model, size).
pub fn export_sim_csv(result: &SimResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "portfolio_size", "mean", "std"])?;
    for r in &result.rows {
        w.write_record([
            r.model.clone(),
            r.portfolio_size.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sim_csv(path: impl AsRef<Path>) -> Result<Vec<SimRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

impl SimResult {
    /// Aggregates as they appear in the CSV.
    pub fn summary(&self) -> Vec<SimRow> {
        self.rows
            .iter()
            .map(|r| SimRow {
                model: r.model.clone(),
                portfolio_size: r.portfolio_size,
                mean: r.mean,
                std: r.std,
            })
            .collect()
    }

    /// Full result including raw repeat values.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}
