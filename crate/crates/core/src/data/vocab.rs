use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::record::RawCompanyRecord;
use super::schema::FEATURES;

/// Category strings of one categorical feature, indexed from 2.
///
/// Index 0 is reserved for categories never seen while building the
/// vocabulary, index 1 for missing values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocabulary {
    pub feature: String,
    pub categories: Vec<String>,
}

impl CategoryVocabulary {
    pub const UNKNOWN: usize = 0;
    pub const MISSING: usize = 1;
    pub const RESERVED: usize = 2;

    pub fn new(feature: &str, categories: Vec<String>) -> Self {
        Self {
            feature: feature.to_string(),
            categories,
        }
    }

    /// Collects the distinct values of `column` across `records`, sorted.
    pub fn build(records: &[RawCompanyRecord], column: usize) -> Self {
        let name = FEATURES[column].name;
        let set: BTreeSet<String> = records
            .iter()
            .flat_map(|r| r.observations.iter())
            .filter_map(|o| o.features.get(name).and_then(|v| v.as_text()).map(str::to_string))
            .collect();
        Self::new(name, set.into_iter().collect())
    }

    /// Vocabulary size including the reserved ids.
    pub fn size(&self) -> usize {
        self.categories.len() + Self::RESERVED
    }

    pub fn encode(&self, value: Option<&str>) -> usize {
        match value {
            None => Self::MISSING,
            Some(v) => self
                .categories
                .iter()
                .position(|c| c == v)
                .map_or(Self::UNKNOWN, |i| i + Self::RESERVED),
        }
    }
}

/// Encodes one categorical value against `vocab`.
pub fn encode_categorical(value: Option<&str>, vocab: &CategoryVocabulary) -> usize {
    vocab.encode(value)
}
