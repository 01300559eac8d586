use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{N_FEATURES, SEQ_LEN};
use crate::error::{Error, Result};

/// One company's preprocessed `SEQ_LEN × N_FEATURES` panel.
///
/// `mask[t]` is `true` when step `t` carries data and `false` for padding.
/// The last row is the most recent month.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompanyPanel {
    pub company_id: String,
    pub investor_group_id: String,
    pub y: u8,
    pub x: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl CompanyPanel {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Validation {
            field: field.into(),
            message,
        };
        if self.x.len() != SEQ_LEN || self.x.iter().any(|r| r.len() != N_FEATURES) {
            return Err(bad("x", format!("must be {SEQ_LEN}x{N_FEATURES}")));
        }
        if self.mask.len() != SEQ_LEN {
            return Err(bad("mask", format!("must have {SEQ_LEN} entries")));
        }
        if self.y > 1 {
            return Err(bad("y", "must be 0 or 1".into()));
        }
        if self.x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("x", "non-finite value".into()));
        }
        Ok(())
    }

    pub fn n_valid_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn save_panels(path: impl AsRef<Path>, panels: &[CompanyPanel]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in panels {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_panels(path: impl AsRef<Path>) -> Result<Vec<CompanyPanel>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: CompanyPanel = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}
