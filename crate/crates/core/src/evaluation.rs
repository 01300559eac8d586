//! Accuracy, precision, AUC-ROC and ROC curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Precision is `None` when nothing is predicted positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPrecision {
    pub accuracy: f64,
    pub precision: Option<f64>,
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NumericInput("score is NaN".into()));
    }
    Ok(())
}

/// Predicts 1 iff `score >= threshold`.
pub fn accuracy_precision(scores: &[f64], labels: &[u8], threshold: f64) -> Result<AccuracyPrecision> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Degenerate("no samples to score".into()));
    }
    let (mut correct, mut tp, mut fp) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        correct += usize::from(pred == (y == 1));
        match (pred, y) {
            (true, 1) => tp += 1,
            (true, _) => fp += 1,
            _ => {}
        }
    }
    Ok(AccuracyPrecision {
        accuracy: correct as f64 / scores.len() as f64,
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
    })
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by score, ascending.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Mann-Whitney rank statistic with midranks.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let idx = order(scores);
    // sum over positives of (#negatives below + half the tied negatives),
    // accumulated per block of equal scores in integer half-units
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// One point per distinct score (predicting positive at `score >= threshold`),
/// from `(0, 0)` at threshold `+inf` to `(1, 1)` at `-inf`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut idx = order(scores);
    idx.reverse();
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    points.push(RocPoint {
        fpr: 1.0,
        tpr: 1.0,
        threshold: f64::NEG_INFINITY,
    });
    Ok(points)
}

/// Trapezoidal area under a curve ordered by increasing fpr.
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn write_roc_csv(path: impl AsRef<Path>, curve: &[RocPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    for p in curve {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Metrics of one trained model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub auc_roc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample (n − 1) standard deviation; std is 0 for one value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: MeanStd,
    /// Over the seeds where precision is defined; `None` if it never is.
    pub precision: Option<MeanStd>,
    pub auc_roc: MeanStd,
    pub n_test: usize,
    pub n_positive: usize,
    pub threshold: f64,
    pub per_seed: Vec<SeedMetrics>,
}

impl MetricsReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Scores and labels of one run on the test set.
pub struct RunScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn seed_metrics(seed: u64, run: &RunScores, threshold: f64) -> Result<SeedMetrics> {
    let ap = accuracy_precision(&run.scores, &run.labels, threshold)?;
    Ok(SeedMetrics {
        seed,
        accuracy: ap.accuracy,
        precision: ap.precision,
        auc_roc: auc_roc(&run.scores, &run.labels)?,
    })
}

/// Runs `run(seed)` for seeds `0..n_seeds` and aggregates the metrics as
/// mean ± sample standard deviation.
pub fn evaluate_runs(
    n_seeds: usize,
    threshold: f64,
    mut run: impl FnMut(u64) -> Result<RunScores>,
) -> Result<MetricsReport> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    let mut per_seed = Vec::with_capacity(n_seeds);
    let (mut n_test, mut n_positive) = (0, 0);
    for seed in 0..n_seeds as u64 {
        let r = run(seed)?;
        n_test = r.labels.len();
        n_positive = r.labels.iter().filter(|&&y| y == 1).count();
        per_seed.push(seed_metrics(seed, &r, threshold)?);
    }
    Ok(aggregate(per_seed, n_test, n_positive, threshold))
}

pub fn aggregate(per_seed: Vec<SeedMetrics>, n_test: usize, n_positive: usize, threshold: f64) -> MetricsReport {
    let col = |f: &dyn Fn(&SeedMetrics) -> Option<f64>| -> Vec<f64> { per_seed.iter().filter_map(f).collect() };
    MetricsReport {
        accuracy: MeanStd::of(&col(&|m| Some(m.accuracy))).unwrap_or(MeanStd { mean: 0.0, std: 0.0 }),
        precision: MeanStd::of(&col(&|m| m.precision)),
        auc_roc: MeanStd::of(&col(&|m| Some(m.auc_roc))).unwrap_or(MeanStd { mean: 0.0, std: 0.0 }),
        n_test,
        n_positive,
        threshold,
        per_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_example() {
        let r = accuracy_precision(&[0.9, 0.8, 0.1, 0.2], &[1, 0, 0, 0], 0.5).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.precision, Some(0.5));
        let r = accuracy_precision(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(r.precision, None);
        let r = accuracy_precision(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((r.accuracy, r.precision), (1.0, Some(1.0)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.3; 5], &[0, 1, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc_roc(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn roc_shapes() {
        let c = roc_curve(&[0.2, 0.2, 0.7, 0.7], &[0, 1, 0, 1]).unwrap();
        assert_eq!(c.len(), 4);
        let c = roc_curve(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!(c.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(trapezoid_area(&c), 1.0);
    }

    #[test]
    fn single_seed_has_zero_std() {
        let r = evaluate_runs(1, 0.5, |_| {
            Ok(RunScores {
                scores: vec![0.1, 0.9, 0.6],
                labels: vec![0, 1, 0],
            })
        })
        .unwrap();
        assert_eq!(r.auc_roc.std, 0.0);
        assert_eq!(r.per_seed.len(), 1);
    }
}
