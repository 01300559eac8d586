//! Record → panel preprocessing.
//!
//! Order is fixed: align to a monthly grid, impute `total_funding` and
//! `valuation`, log-scale observed values of the flagged features, fill the
//! remaining gaps with the sentinel, then pad or truncate to [`SEQ_LEN`]
//! steps. The sentinel never passes through the log transform.

use super::panel::CompanyPanel;
use super::record::{FeatureValue, Month, RawCompanyRecord, Task};
use super::schema::{
    FeatureKind, FEATURES, MIN_OBSERVED_MONTHS, N_FEATURES, ROUND_TYPE, SENTINEL, SEQ_LEN,
    TOTAL_FUNDING, VALUATION,
};
use super::vocab::CategoryVocabulary;
use crate::error::{Error, Result};

/// One slot per calendar month between a record's first and last
/// observation; `cells[t][k]` is `None` when feature `k` is missing.
#[derive(Clone, Debug, PartialEq)]
pub struct MonthlyGrid {
    pub first: Month,
    pub cells: Vec<Vec<Option<FeatureValue>>>,
}

impl MonthlyGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Observed months per feature column.
    pub fn observed_counts(&self) -> [usize; N_FEATURES] {
        let mut counts = [0; N_FEATURES];
        for row in &self.cells {
            for (c, cell) in counts.iter_mut().zip(row) {
                *c += usize::from(cell.is_some());
            }
        }
        counts
    }

    pub fn numeric_series(&self, column: usize) -> Vec<Option<f64>> {
        self.cells
            .iter()
            .map(|row| row[column].as_ref().and_then(FeatureValue::as_number))
            .collect()
    }
}

pub fn align_monthly(record: &RawCompanyRecord) -> Result<MonthlyGrid> {
    let first = record
        .observations
        .first()
        .ok_or_else(|| Error::EmptyRecord(record.company_id.clone()))?
        .month;
    let last = record.observations.last().unwrap().month;
    for w in record.observations.windows(2) {
        if w[1].month <= w[0].month {
            return Err(Error::Precondition(format!(
                "{}: observations not sorted by month ({} then {})",
                record.company_id, w[0].month, w[1].month
            )));
        }
    }
    let len = (last.ordinal() - first.ordinal() + 1) as usize;
    let mut cells = vec![vec![None; N_FEATURES]; len];
    for obs in &record.observations {
        let t = (obs.month.ordinal() - first.ordinal()) as usize;
        for (k, f) in FEATURES.iter().enumerate() {
            cells[t][k] = obs.features.get(f.name).cloned();
        }
    }
    Ok(MonthlyGrid { first, cells })
}

/// Forward fill; leading gaps become 0.
pub fn impute_total_funding(series: &[Option<f64>]) -> Vec<f64> {
    let mut prev: Option<f64> = None;
    series
        .iter()
        .map(|v| {
            let out = v.or(prev).unwrap_or(0.0);
            prev = Some(out);
            out
        })
        .collect()
}

/// Missing valuations take the cumulative funding of the same month.
pub fn impute_valuation(valuation: &[Option<f64>], total_funding: &[f64]) -> Vec<f64> {
    valuation
        .iter()
        .zip(total_funding)
        .map(|(v, f)| v.unwrap_or(*f))
        .collect()
}

/// `ln(1 + x)` for `x ≥ 0`.
pub fn log_scale(x: f64) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::Domain(format!("log_scale of {x}")));
    }
    Ok(x.ln_1p())
}

/// Per-step numeric values after imputation, scaling and categorical
/// encoding. The categorical column holds the vocabulary id as a float.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGrid {
    pub rows: Vec<[Option<f64>; N_FEATURES]>,
}

/// A fixed-length panel before it is attached to a company.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGrid {
    pub x: Vec<[f64; N_FEATURES]>,
    pub cell_observed: Vec<[bool; N_FEATURES]>,
    /// `true` for steps carrying any data; `false` for padding and for
    /// steps where every feature is missing.
    pub step_valid: Vec<bool>,
}

/// Imputes, log-scales and encodes an aligned grid.
pub fn encode_grid(grid: &MonthlyGrid, vocab: &CategoryVocabulary) -> Result<EncodedGrid> {
    let funding = impute_total_funding(&grid.numeric_series(TOTAL_FUNDING));
    let valuation = impute_valuation(&grid.numeric_series(VALUATION), &funding);
    let mut rows = Vec::with_capacity(grid.len());
    for (t, cells) in grid.cells.iter().enumerate() {
        let mut row = [None; N_FEATURES];
        for (k, f) in FEATURES.iter().enumerate() {
            row[k] = match f.kind {
                FeatureKind::Categorical => {
                    let text = cells[k].as_ref().and_then(FeatureValue::as_text);
                    text.map(|s| vocab.encode(Some(s)) as f64)
                }
                FeatureKind::Numeric => {
                    let raw = match k {
                        TOTAL_FUNDING => Some(funding[t]),
                        VALUATION => Some(valuation[t]),
                        _ => cells[k].as_ref().and_then(FeatureValue::as_number),
                    };
                    match raw {
                        Some(v) if f.log_transform => Some(log_scale(v)?),
                        other => other,
                    }
                }
            };
        }
        rows.push(row);
    }
    Ok(EncodedGrid { rows })
}

/// Sentinel-fills remaining gaps and left-pads (or keeps the most recent
/// `seq_len` months) so the last row is the latest month.
pub fn fill_sentinel_and_pad(grid: &EncodedGrid, seq_len: usize) -> PaddedGrid {
    let n = grid.rows.len();
    let kept = &grid.rows[n.saturating_sub(seq_len)..];
    let pad = seq_len - kept.len();
    let mut x = vec![[SENTINEL; N_FEATURES]; seq_len];
    let mut cell_observed = vec![[false; N_FEATURES]; seq_len];
    let mut step_valid = vec![false; seq_len];
    for t in 0..seq_len {
        x[t][ROUND_TYPE] = CategoryVocabulary::MISSING as f64;
        if t < pad {
            continue;
        }
        let row = &kept[t - pad];
        for k in 0..N_FEATURES {
            if let Some(v) = row[k] {
                x[t][k] = v;
                cell_observed[t][k] = true;
            }
        }
        step_valid[t] = cell_observed[t].iter().any(|&o| o);
    }
    PaddedGrid {
        x,
        cell_observed,
        step_valid,
    }
}

/// Keeps records where at least one feature has
/// [`MIN_OBSERVED_MONTHS`] observed months.
pub fn filter_short_series(records: Vec<RawCompanyRecord>) -> Vec<RawCompanyRecord> {
    records
        .into_iter()
        .filter(|r| match align_monthly(r) {
            Ok(grid) => grid
                .observed_counts()
                .iter()
                .any(|&c| c >= MIN_OBSERVED_MONTHS),
            Err(_) => false,
        })
        .collect()
}

/// Full pipeline for one record.
pub fn build_panel(
    record: &RawCompanyRecord,
    task: Task,
    vocab: &CategoryVocabulary,
) -> Result<CompanyPanel> {
    let grid = align_monthly(record)?;
    let encoded = encode_grid(&grid, vocab)?;
    let padded = fill_sentinel_and_pad(&encoded, SEQ_LEN);
    Ok(CompanyPanel {
        company_id: record.company_id.clone(),
        investor_group_id: record.investor_group_id.clone(),
        y: record.label(task),
        x: padded.x.iter().map(|r| r.to_vec()).collect(),
        mask: padded.step_valid,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::data::record::Observation;

    fn obs(month: &str, feats: &[(&str, FeatureValue)]) -> Observation {
        Observation {
            month: month.parse().unwrap(),
            features: feats
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    fn record(observations: Vec<Observation>) -> RawCompanyRecord {
        RawCompanyRecord {
            company_id: "c".into(),
            investor_group_id: "g".into(),
            label_vc: 1,
            label_gc: 0,
            observations,
        }
    }

    fn num(v: f64) -> FeatureValue {
        FeatureValue::Number(v)
    }

    #[test]
    fn align_inserts_gaps() {
        let r = record(vec![
            obs("2020-01", &[("n_news", num(1.0))]),
            obs("2020-03", &[("n_news", num(2.0))]),
        ]);
        let g = align_monthly(&r).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.cells[1].iter().all(Option::is_none));
        assert_eq!(g.numeric_series(13), vec![Some(1.0), None, Some(2.0)]);
    }

    #[test]
    fn align_single_and_errors() {
        let r = record(vec![obs("2021-05", &[])]);
        assert_eq!(align_monthly(&r).unwrap().len(), 1);
        assert!(matches!(align_monthly(&record(vec![])), Err(Error::EmptyRecord(_))));
        let r = record(vec![obs("2021-05", &[]), obs("2021-04", &[])]);
        assert!(matches!(align_monthly(&r), Err(Error::Precondition(_))));
    }

    #[test]
    fn total_funding_imputation() {
        assert_eq!(
            impute_total_funding(&[None, Some(5e6), None, None]),
            vec![0.0, 5e6, 5e6, 5e6]
        );
        assert_eq!(impute_total_funding(&[None, None]), vec![0.0, 0.0]);
        assert_eq!(impute_total_funding(&[Some(1.0), Some(3.0)]), vec![1.0, 3.0]);
    }

    #[test]
    fn valuation_imputation() {
        assert_eq!(impute_valuation(&[None, Some(1e7)], &[3e6, 4e6]), vec![3e6, 1e7]);
        assert_eq!(impute_valuation(&[Some(2.0), Some(9.0)], &[1.0, 1.0]), vec![2.0, 9.0]);
        assert_eq!(impute_valuation(&[None], &[0.0]), vec![0.0]);
    }

    #[test]
    fn log_scale_values() {
        assert_eq!(log_scale(0.0).unwrap(), 0.0);
        assert!((log_scale(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        let v = log_scale(2e11).unwrap();
        assert!((v - 26.0216).abs() < 1e-3, "{v}");
        assert!(matches!(log_scale(-1.0), Err(Error::Domain(_))));
    }

    fn encoded(n: usize) -> EncodedGrid {
        EncodedGrid {
            rows: (0..n)
                .map(|t| {
                    let mut r = [None; N_FEATURES];
                    r[TOTAL_FUNDING] = Some(t as f64);
                    r
                })
                .collect(),
        }
    }

    #[test]
    fn pads_on_the_left() {
        let p = fill_sentinel_and_pad(&encoded(6), 24);
        assert_eq!(p.x.len(), 24);
        assert!(p.step_valid[..18].iter().all(|v| !v));
        assert!(p.step_valid[18..].iter().all(|&v| v));
        assert_eq!(p.x[23][TOTAL_FUNDING], 5.0);
        assert_eq!(p.x[0][TOTAL_FUNDING], SENTINEL);
        assert_eq!(p.x[0][ROUND_TYPE], CategoryVocabulary::MISSING as f64);
        // unobserved numeric cells inside the grid get the sentinel
        assert_eq!(p.x[23][5], SENTINEL);
        assert!(!p.cell_observed[23][5]);
    }

    #[test]
    fn truncates_to_most_recent() {
        let p = fill_sentinel_and_pad(&encoded(30), 24);
        assert_eq!(p.x[0][TOTAL_FUNDING], 6.0);
        assert_eq!(p.x[23][TOTAL_FUNDING], 29.0);
        assert!(p.step_valid.iter().all(|&v| v));
        let p = fill_sentinel_and_pad(&encoded(24), 24);
        assert!(p.step_valid.iter().all(|&v| v));
    }

    #[test]
    fn short_series_filter() {
        let months: Vec<String> = (1..=9).map(|m| format!("2020-{m:02}")).collect();
        // n_news observed 7 months, n_investor 2
        let keep = record(
            months[..7]
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    if i < 2 {
                        obs(m, &[("n_news", num(1.0)), ("n_investor", num(1.0))])
                    } else {
                        obs(m, &[("n_news", num(1.0))])
                    }
                })
                .collect(),
        );
        let drop = record(months[..5].iter().map(|m| obs(m, &[("n_news", num(1.0))])).collect());
        let kept = filter_short_series(vec![keep.clone(), drop, record(vec![])]);
        assert_eq!(kept, vec![keep]);
    }

    #[test]
    fn sentinel_never_logged() {
        let r = record(vec![
            obs("2020-01", &[("n_news", num(0.0))]),
            obs("2020-02", &[]),
        ]);
        let vocab = CategoryVocabulary::new("round_type", vec![]);
        let p = build_panel(&r, Task::Vc, &vocab).unwrap();
        assert_eq!(p.x[22][13], 0.0);
        assert_eq!(p.x[23][13], SENTINEL);
        assert_eq!(p.x[23][TOTAL_FUNDING], 0.0);
        assert!(p.mask[22] && p.mask[23] && !p.mask[21]);
    }
}
