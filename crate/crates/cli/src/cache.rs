//! On-disk panel cache written by `prepare`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmtsc_core::data::{load_panels, save_panels, CategoryVocabulary, CompanyPanel, FeatureSchema, Task};
use tmtsc_core::{Error, Result};

use crate::manifest::io;

pub const TRAIN: &str = "train.jsonl";
pub const VALIDATION: &str = "validation.jsonl";
pub const TEST: &str = "test.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const META: &str = "panels.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub task: Task,
    pub schema_hash: String,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
}

pub struct PanelCache {
    pub meta: CacheMeta,
    pub vocab: CategoryVocabulary,
    pub train: Vec<CompanyPanel>,
    pub validation: Vec<CompanyPanel>,
    pub test: Vec<CompanyPanel>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl PanelCache {
    /// Writes every part; an empty validation part gets no file. Returns
    /// the files written.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut written = Vec::new();
        for (name, part) in [(TRAIN, &self.train), (VALIDATION, &self.validation), (TEST, &self.test)] {
            if part.is_empty() && name == VALIDATION {
                continue;
            }
            let path = dir.join(name);
            save_panels(&path, part)?;
            written.push(path);
        }
        for (name, value) in [
            (VOCAB, serde_json::to_value(&self.vocab)?),
            (META, serde_json::to_value(&self.meta)?),
        ] {
            let path = dir.join(name);
            write_json(&path, &value)?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CacheMeta = read_json(&dir.join(META))?;
        let expected = FeatureSchema.hash();
        if meta.schema_hash != expected {
            return Err(Error::SchemaMismatch {
                expected,
                found: meta.schema_hash,
            });
        }
        let part = |name: &str| -> Result<Vec<CompanyPanel>> {
            let path = dir.join(name);
            if name == VALIDATION && !path.exists() {
                return Ok(Vec::new());
            }
            let panels = load_panels(&path)?;
            for p in &panels {
                p.validate()?;
            }
            Ok(panels)
        };
        Ok(Self {
            vocab: read_json(&dir.join(VOCAB))?,
            train: part(TRAIN)?,
            validation: part(VALIDATION)?,
            test: part(TEST)?,
            meta,
        })
    }
}
