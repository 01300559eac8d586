//! Class-conditional generator of company records.
//!
//! Every company gets a latent quality `q ~ N(0, 1)`. Its trajectories
//! (funding rounds, headcount, web traffic, investor track record) are
//! driven by `q`, and each task label is drawn independently with
//! `P(y = 1) = sigmoid(signal_strength · LABEL_SCALE · q + β)`, where `β`
//! is solved so the expected positive rate equals the configured balance.
//! At `signal_strength = 0` labels are independent of every feature.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureValue, Month, Observation, RawCompanyRecord};
use crate::error::{Error, Result};
use crate::numerics::real::sigmoid;
use crate::numerics::Rng;

/// Logit slope per unit of `q` at full signal strength. Puts the AUC of
/// `q` itself against the labels (the Bayes AUC) at about 0.97.
pub const LABEL_SCALE: f64 = 5.5;

/// Ordered round stages; a company moves only forward through the list.
pub const STAGES: [&str; 12] = [
    "Pre-Seed",
    "Seed",
    "Series A",
    "Series B",
    "Series C",
    "Series D",
    "Series E",
    "Series F",
    "Series G",
    "Series H",
    "Late Stage",
    "Private Equity",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_companies: usize,
    pub seed: u64,
    /// Expected fraction of positive VC labels.
    pub class_balance_vc: f64,
    pub class_balance_gc: f64,
    /// 0 makes labels independent of features; 1 is strongly separable.
    pub signal_strength: f64,
    /// Probability that any single feature cell is dropped.
    pub missing_rate: f64,
    /// Observed months per company, drawn uniformly from this range.
    pub min_months: usize,
    pub max_months: usize,
    /// Number of round stages in use, at most [`STAGES`]`.len()`.
    pub n_stages: usize,
    /// Companies per investor group, on average.
    pub group_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_companies: 1000,
            seed: 0,
            class_balance_vc: 0.5,
            class_balance_gc: 0.5,
            signal_strength: 1.0,
            missing_rate: 0.1,
            min_months: 1,
            max_months: 36,
            n_stages: STAGES.len(),
            group_size: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("class_balance_vc", self.class_balance_vc)?;
        unit("class_balance_gc", self.class_balance_gc)?;
        unit("signal_strength", self.signal_strength)?;
        unit("missing_rate", self.missing_rate)?;
        if self.n_companies == 0 {
            return Err(Error::Config("n_companies must be at least 1".into()));
        }
        if self.min_months == 0 || self.min_months > self.max_months {
            return Err(Error::Config(format!(
                "series length range {}..={} is empty or starts at 0",
                self.min_months, self.max_months
            )));
        }
        if self.n_stages == 0 || self.n_stages > STAGES.len() {
            return Err(Error::Config(format!(
                "n_stages must be in 1..={}",
                STAGES.len()
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `(exit / start)^(1 / years) − 1`.
pub fn compute_cagr(start_value: f64, exit_value: f64, years: f64) -> Result<f64> {
    for (name, v) in [("start_value", start_value), ("exit_value", exit_value), ("years", years)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} = {v} must be positive")));
        }
    }
    Ok((exit_value / start_value).powf(1.0 / years) - 1.0)
}

/// Standard normal quadrature nodes and weights on a fine grid.
fn normal_grid() -> (Vec<f64>, Vec<f64>) {
    let n = 4001;
    let q: Vec<f64> = (0..n).map(|i| -8.0 + 16.0 * i as f64 / (n - 1) as f64).collect();
    let mut w: Vec<f64> = q.iter().map(|x| (-x * x / 2.0).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (q, w)
}

/// Logit intercept `β` with `E[sigmoid(slope · q + β)] = balance` for
/// standard normal `q`. Infinite for balances of exactly 0 or 1.
pub fn label_intercept(slope: f64, balance: f64) -> f64 {
    if balance <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if balance >= 1.0 {
        return f64::INFINITY;
    }
    let (q, w) = normal_grid();
    let rate = |b: f64| -> f64 { q.iter().zip(&w).map(|(&x, &wi)| wi * sigmoid(slope * x + b)).sum() };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < balance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// AUC of the latent `q` as a score for labels drawn with the given slope
/// and balance: the best any classifier can do.
pub fn bayes_auc(slope: f64, balance: f64) -> f64 {
    let b = label_intercept(slope, balance);
    let (q, w) = normal_grid();
    let pos: Vec<f64> = q.iter().zip(&w).map(|(&x, &wi)| wi * sigmoid(slope * x + b)).collect();
    let neg: Vec<f64> = w.iter().zip(&pos).map(|(&wi, &p)| wi - p).collect();
    let (sp, sn): (f64, f64) = (pos.iter().sum(), neg.iter().sum());
    let mut below = 0.0;
    let mut auc = 0.0;
    for (p, n) in pos.iter().zip(&neg) {
        auc += p * (below + n / 2.0);
        below += n;
    }
    auc / (sp * sn)
}

struct Company {
    q: f64,
    months: usize,
    start: Month,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Investor track record: CAGRs of the lead investors' past deals.
fn investor_record(rng: &mut Rng, q: f64) -> (f64, f64) {
    let deals = rng.int_range(3, 12) as usize;
    let mut cagrs = Vec::with_capacity(deals);
    for _ in 0..deals {
        let years = rng.int_range(2, 8) as f64;
        let log_multiple = (0.9 + 0.5 * q + 0.6 * rng.normal(0.0, 1.0)) * years / 2.0;
        let exit = log_multiple.clamp(-5.0, 30.0).exp();
        cagrs.push(compute_cagr(1.0, exit, years).expect("positive deal values"));
    }
    let mean = cagrs.iter().sum::<f64>() / deals as f64;
    let two_x = cagrs.iter().filter(|&&c| c >= 2.0).count() as f64 / deals as f64;
    (mean.max(0.0), two_x)
}

fn company_record(cfg: &SynthConfig, id: usize, c: &Company, rng: &mut Rng, betas: (f64, f64)) -> RawCompanyRecord {
    let q = c.q;
    let slope = cfg.signal_strength * LABEL_SCALE;
    let label = |rng: &mut Rng, b: f64| u8::from(rng.bernoulli(sigmoid(slope * q + b)));
    let label_vc = label(rng, betas.0);
    let label_gc = label(rng, betas.1);

    let n_groups = cfg.n_companies.div_ceil(cfg.group_size).max(1);
    let group = rng.int_range(0, n_groups as i64 - 1);

    let noise = |rng: &mut Rng, s: f64| rng.normal(0.0, s);
    // company-level traits, each a noisy reading of q
    let growth = 0.035 + 0.025 * (q + noise(rng, 0.3));
    let round_gap = (9.0 - 3.0 * (q + noise(rng, 0.3))).clamp(3.0, 18.0);
    let founders = (2.5 + 0.8 * q + noise(rng, 0.7)).round().clamp(1.0, 38.0);
    let growth_investor_rate = sigmoid(1.2 * q + noise(rng, 0.3));
    let investor_q = q + noise(rng, 0.2);
    let (avg_cagr, two_x_rate) = investor_record(rng, investor_q);
    let popularity = sigmoid(0.8 * q + noise(rng, 0.4));
    let region_seed = rng.int_range(5, 400) as f64;
    let region_ab = (region_seed * (0.2 + 0.1 * rng.uniform())).round();
    let seed_size = (0.5e6 * (1.0 + 1.2 * q + noise(rng, 0.3)).exp()).min(5e7);

    let mut stage = rng.int_range(0, 1) as usize;
    let mut since_round = rng.int_range(0, round_gap as i64) as f64;
    let mut funding = seed_size;
    let mut employees = (3.0 + 4.0 * rng.uniform()) * (0.3 * q).exp();
    let mut traffic = (8.0 + 0.8 * q + noise(rng, 0.5)).exp();
    let mut investors = (1.0 + rng.uniform() * 2.0 + q.max(0.0)).round();
    let mut news = 0.0;

    let mut observations = Vec::with_capacity(c.months);
    for t in 0..c.months {
        since_round += 1.0;
        if since_round >= round_gap && stage + 1 < cfg.n_stages {
            stage += 1;
            since_round = 0.0;
            funding += seed_size * 2.2f64.powi(stage as i32) * (0.15 * q + noise(rng, 0.2)).exp();
            investors += (1.0 + 2.0 * rng.uniform() + q.max(0.0)).round();
        }
        employees *= (growth + noise(rng, 0.02)).exp();
        traffic *= (1.2 * growth + noise(rng, 0.08)).exp();
        news += (rng.uniform() * (1.0 + q.max(-0.9))).floor();
        let valuation = funding * (3.0 + 1.5 * q + noise(rng, 0.3)).max(1.0);

        let mut f: BTreeMap<String, FeatureValue> = BTreeMap::new();
        let mut put = |rng: &mut Rng, name: &str, v: FeatureValue| {
            if !rng.bernoulli(cfg.missing_rate) {
                f.insert(name.to_string(), v);
            }
        };
        let num = FeatureValue::Number;
        put(rng, "round_type", FeatureValue::Text(STAGES[stage].to_string()));
        put(rng, "total_funding", num(funding.round().min(2e11)));
        put(rng, "valuation", num(valuation.round().min(1e12)));
        put(rng, "n_founder", num(founders));
        put(rng, "n_employee", num(employees.round().clamp(1.0, 113_757.0)));
        put(rng, "n_investor", num(investors.min(240.0)));
        put(rng, "growth_investor_rate", num(round2(growth_investor_rate)));
        put(rng, "average_cagr", num(round2(avg_cagr)));
        put(rng, "2x_cagr_rate", num(round2(two_x_rate)));
        put(rng, "cu_popularity", num(round2(100.0 * popularity * (1.0 + 0.02 * t as f64))));
        put(rng, "sw_global_rank", num((3e7 / traffic).round().max(1.0)));
        put(rng, "n_desktop_visitor", num((0.6 * traffic).round()));
        put(rng, "n_mobile_visitor", num((0.4 * traffic).round()));
        put(rng, "n_news", num(news.min(389.0)));
        put(rng, "n_regional_seed_round", num(region_seed));
        put(rng, "n_regional_series_ab", num(region_ab));
        observations.push(Observation {
            month: c.start.plus(t as i64),
            features: f,
        });
    }
    RawCompanyRecord {
        company_id: format!("c{id:06}"),
        investor_group_id: format!("g{group:05}"),
        label_vc,
        label_gc,
        observations,
    }
}

/// Generates `config.n_companies` records; identical configs give
/// identical output.
pub fn generate(config: &SynthConfig) -> Result<Vec<RawCompanyRecord>> {
    config.validate()?;
    let slope = config.signal_strength * LABEL_SCALE;
    let betas = (
        label_intercept(slope, config.class_balance_vc),
        label_intercept(slope, config.class_balance_gc),
    );
    let root = Rng::new(config.seed);
    let base = Month::new(2010, 1)?;
    let records = (0..config.n_companies)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let company = Company {
                q: rng.normal(0.0, 1.0),
                months: rng.int_range(config.min_months as i64, config.max_months as i64) as usize,
                start: base.plus(rng.int_range(0, 119)),
            };
            company_record(config, i, &company, &mut rng, betas)
        })
        .collect();
    Ok(records)
}
