use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Number of monthly steps in every panel.
pub const SEQ_LEN: usize = 24;
/// Number of raw features per step.
pub const N_FEATURES: usize = 16;
/// Value written into numeric cells that stay missing after imputation.
pub const SENTINEL: f64 = -1.0;
/// Minimum observed months some feature must reach for a record to be kept.
pub const MIN_OBSERVED_MONTHS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureCategory {
    Funding,
    Founder,
    Team,
    Investor,
    Web,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FeatureDescriptor {
    pub name: &'static str,
    pub kind: FeatureKind,
    pub category: FeatureCategory,
    /// Documented value range, where one is known.
    pub range: Option<(f64, f64)>,
    pub log_transform: bool,
}

const fn numeric(
    name: &'static str,
    category: FeatureCategory,
    range: Option<(f64, f64)>,
    log_transform: bool,
) -> FeatureDescriptor {
    FeatureDescriptor {
        name,
        kind: FeatureKind::Numeric,
        category,
        range,
        log_transform,
    }
}

use FeatureCategory::*;

/// The 16 monthly features, in column order.
pub const FEATURES: [FeatureDescriptor; N_FEATURES] = [
    FeatureDescriptor {
        name: "round_type",
        kind: FeatureKind::Categorical,
        category: Funding,
        range: None,
        log_transform: false,
    },
    numeric("total_funding", Funding, Some((0.0, 2e11)), true),
    numeric("valuation", Funding, Some((0.0, 1e12)), true),
    numeric("n_founder", Founder, Some((0.0, 38.0)), true),
    numeric("n_employee", Team, Some((1.0, 113_757.0)), false),
    numeric("n_investor", Investor, Some((0.0, 240.0)), true),
    numeric("growth_investor_rate", Investor, Some((0.0, 1.0)), true),
    numeric("average_cagr", Investor, None, true),
    numeric("2x_cagr_rate", Investor, Some((0.0, 1.0)), true),
    numeric("cu_popularity", Web, None, false),
    numeric("sw_global_rank", Web, None, true),
    numeric("n_desktop_visitor", Web, None, true),
    numeric("n_mobile_visitor", Web, None, true),
    numeric("n_news", Web, Some((0.0, 389.0)), true),
    numeric("n_regional_seed_round", Context, None, true),
    numeric("n_regional_series_ab", Context, None, true),
];

/// Column of the single categorical feature.
pub const ROUND_TYPE: usize = 0;
pub const TOTAL_FUNDING: usize = 1;
pub const VALUATION: usize = 2;

/// Ordered feature descriptors with lookup helpers.
#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureSchema;

impl FeatureSchema {
    pub fn features(&self) -> &'static [FeatureDescriptor; N_FEATURES] {
        &FEATURES
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        FEATURES.iter().position(|f| f.name == name)
    }

    /// Columns of the numeric features, in order.
    pub fn numeric_columns(&self) -> Vec<usize> {
        (0..N_FEATURES)
            .filter(|&i| FEATURES[i].kind == FeatureKind::Numeric)
            .collect()
    }

    pub fn in_documented_range(&self, column: usize, value: f64) -> bool {
        match FEATURES[column].range {
            Some((lo, hi)) => (lo..=hi).contains(&value),
            None => value >= 0.0,
        }
    }

    /// Stable fingerprint of the schema and panel length, stored in
    /// checkpoints and panel caches so mismatched artifacts are rejected.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("T={SEQ_LEN};sentinel={SENTINEL};"));
        for f in &FEATURES {
            h.update(format!(
                "{}:{:?}:{:?}:{};",
                f.name, f.kind, f.category, f.log_transform
            ));
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_shape() {
        assert_eq!(FEATURES.len(), 16);
        let categorical: Vec<_> = FEATURES
            .iter()
            .filter(|f| f.kind == FeatureKind::Categorical)
            .collect();
        assert_eq!(categorical.len(), 1);
        assert_eq!(categorical[0].name, "round_type");
        let logged: Vec<_> = FEATURES.iter().filter(|f| f.log_transform).map(|f| f.name).collect();
        assert_eq!(logged.len(), 13);
        assert!(!logged.contains(&"cu_popularity"));
        assert!(!logged.contains(&"n_employee"));
        let mut names: Vec<_> = FEATURES.iter().map(|f| f.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 16);
    }

    #[test]
    fn six_categories_present() {
        for c in [Funding, Founder, Team, Investor, Web, Context] {
            assert!(FEATURES.iter().any(|f| f.category == c), "{c:?}");
        }
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(FeatureSchema.hash(), FeatureSchema.hash());
        assert_eq!(FeatureSchema.hash().len(), 16);
    }
}
