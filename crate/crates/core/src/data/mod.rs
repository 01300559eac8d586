//! Feature schema, dataset I/O and preprocessing.

pub mod panel;
pub mod preprocess;
pub mod record;
pub mod schema;
pub mod split;
pub mod vocab;

pub use panel::{load_panels, save_panels, CompanyPanel};
pub use preprocess::{
    align_monthly, build_panel, encode_grid, fill_sentinel_and_pad, filter_short_series,
    impute_total_funding, impute_valuation, log_scale, EncodedGrid, MonthlyGrid, PaddedGrid,
};
pub use record::{
    load_dataset, read_records, save_dataset, write_records, FeatureValue, Month, Observation,
    RawCompanyRecord, Task,
};
pub use schema::{FeatureSchema, FEATURES, N_FEATURES, SENTINEL, SEQ_LEN};
pub use split::{investor_centric_split, DatasetSplit, InvestorGroup, SplitFractions};
pub use vocab::{encode_categorical, CategoryVocabulary};

use crate::error::Result;

/// Panels for one task, split by investor group, with the vocabulary built
/// from the training part only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: DatasetSplit<CompanyPanel>,
    pub vocab: CategoryVocabulary,
}

/// filter → split records → vocabulary from train → panels for every part.
pub fn prepare(
    records: Vec<RawCompanyRecord>,
    task: Task,
    fractions: SplitFractions,
    seed: u64,
) -> Result<PreparedData> {
    let records = filter_short_series(records);
    let split = investor_centric_split(records, fractions, seed)?;
    let vocab = CategoryVocabulary::build(&split.train, schema::ROUND_TYPE);
    let panels = |rs: &[RawCompanyRecord]| -> Result<Vec<CompanyPanel>> {
        rs.iter().map(|r| build_panel(r, task, &vocab)).collect()
    };
    let split = DatasetSplit {
        train: panels(&split.train)?,
        validation: panels(&split.validation)?,
        test: panels(&split.test)?,
        split_seed: seed,
    };
    Ok(PreparedData { split, vocab })
}
