//! Raw company records and their JSONL encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use super::schema::{FeatureKind, FeatureSchema, FEATURES};
use crate::error::{Error, Result};

/// A calendar month.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    year: i32,
    month: u8,
}

impl Month {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Validation {
                field: "month".into(),
                message: format!("month {month} outside 1..=12"),
            });
        }
        Ok(Self { year, month })
    }

    /// Months since year 0.
    pub fn ordinal(&self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ord: i64) -> Self {
        Self {
            year: ord.div_euclid(12) as i32,
            month: (ord.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn plus(&self, months: i64) -> Self {
        Self::from_ordinal(self.ordinal() + months)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation {
            field: "month".into(),
            message: format!("`{s}` is not a YYYY-MM month"),
        };
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 || !y.bytes().chain(m.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u8 = m.parse().map_err(|_| bad())?;
        Month::new(year, month).map_err(|_| bad())
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    Text(String),
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(v) => Some(*v),
            FeatureValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FeatureValue::Text(s) => Some(s),
            FeatureValue::Number(_) => None,
        }
    }
}

/// One month of observations. Absent keys are missing values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub month: Month,
    pub features: BTreeMap<String, FeatureValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawCompanyRecord {
    pub company_id: String,
    pub investor_group_id: String,
    pub label_vc: u8,
    pub label_gc: u8,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vc,
    Gc,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vc" => Ok(Task::Vc),
            "gc" => Ok(Task::Gc),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Vc => "vc",
            Task::Gc => "gc",
        })
    }
}

impl RawCompanyRecord {
    pub fn label(&self, task: Task) -> u8 {
        match task {
            Task::Vc => self.label_vc,
            Task::Gc => self.label_gc,
        }
    }

    /// Checks schema, month ordering and value kinds.
    pub fn validate(&self) -> Result<()> {
        let field_err = |field: String, message: String| Error::Validation { field, message };
        if self.company_id.is_empty() {
            return Err(field_err("company_id".into(), "empty".into()));
        }
        for (name, v) in [("label_vc", self.label_vc), ("label_gc", self.label_gc)] {
            if v > 1 {
                return Err(field_err(name.into(), format!("{v} is not 0 or 1")));
            }
        }
        for (i, w) in self.observations.windows(2).enumerate() {
            if w[1].month <= w[0].month {
                return Err(field_err(
                    format!("observations[{}].month", i + 1),
                    format!("{} does not follow {}", w[1].month, w[0].month),
                ));
            }
        }
        let schema = FeatureSchema;
        for (i, obs) in self.observations.iter().enumerate() {
            for (name, value) in &obs.features {
                let field = format!("observations[{i}].features.{name}");
                let col = schema
                    .index_of(name)
                    .ok_or_else(|| field_err(field.clone(), "unknown feature".into()))?;
                match (FEATURES[col].kind, value) {
                    (FeatureKind::Categorical, FeatureValue::Text(_)) => {}
                    (FeatureKind::Numeric, FeatureValue::Number(v)) if v.is_finite() && *v >= 0.0 => {}
                    (FeatureKind::Numeric, FeatureValue::Number(v)) => {
                        return Err(field_err(field, format!("{v} is not a finite non-negative number")))
                    }
                    (kind, _) => return Err(field_err(field, format!("expected a {kind:?} value"))),
                }
            }
        }
        Ok(())
    }
}

fn required<'a>(obj: &'a serde_json::Map<String, Value>, field: &str) -> Result<&'a Value> {
    obj.get(field).ok_or_else(|| Error::Validation {
        field: field.into(),
        message: "missing".into(),
    })
}

fn parse_label(obj: &serde_json::Map<String, Value>, field: &str) -> Result<u8> {
    match required(obj, field)?.as_u64() {
        Some(v @ (0 | 1)) => Ok(v as u8),
        _ => Err(Error::Validation {
            field: field.into(),
            message: "must be 0 or 1".into(),
        }),
    }
}

fn parse_string(obj: &serde_json::Map<String, Value>, field: &str) -> Result<String> {
    required(obj, field)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Validation {
            field: field.into(),
            message: "must be a string".into(),
        })
}

/// Converts one decoded JSON line into a validated record.
pub fn record_from_json(v: &Value) -> Result<RawCompanyRecord> {
    let obj = v.as_object().ok_or_else(|| Error::Validation {
        field: "<record>".into(),
        message: "not a JSON object".into(),
    })?;
    let company_id = parse_string(obj, "company_id")?;
    let investor_group_id = parse_string(obj, "investor_group_id")?;
    let label_vc = parse_label(obj, "label_vc")?;
    let label_gc = parse_label(obj, "label_gc")?;
    let obs = required(obj, "observations")?
        .as_array()
        .ok_or_else(|| Error::Validation {
            field: "observations".into(),
            message: "must be an array".into(),
        })?;
    let mut observations = Vec::with_capacity(obs.len());
    for (i, o) in obs.iter().enumerate() {
        let o = o.as_object().ok_or_else(|| Error::Validation {
            field: format!("observations[{i}]"),
            message: "not an object".into(),
        })?;
        let month: Month = o
            .get("month")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Validation {
                field: format!("observations[{i}].month"),
                message: "missing or not a string".into(),
            })?
            .parse()
            .map_err(|e: Error| Error::Validation {
                field: format!("observations[{i}].month"),
                message: e.to_string(),
            })?;
        let mut features = BTreeMap::new();
        if let Some(f) = o.get("features") {
            let f = f.as_object().ok_or_else(|| Error::Validation {
                field: format!("observations[{i}].features"),
                message: "not an object".into(),
            })?;
            for (name, val) in f {
                let fv = match val {
                    Value::Null => continue,
                    Value::Number(n) => FeatureValue::Number(n.as_f64().unwrap_or(f64::NAN)),
                    Value::String(s) => FeatureValue::Text(s.clone()),
                    _ => {
                        return Err(Error::Validation {
                            field: format!("observations[{i}].features.{name}"),
                            message: "must be a number, string or null".into(),
                        })
                    }
                };
                features.insert(name.clone(), fv);
            }
        }
        observations.push(Observation { month, features });
    }
    let rec = RawCompanyRecord {
        company_id,
        investor_group_id,
        label_vc,
        label_gc,
        observations,
    };
    rec.validate()?;
    Ok(rec)
}

fn with_line(line: usize, e: Error) -> Error {
    match e {
        Error::Validation { field, message } => Error::Validation {
            field,
            message: format!("{message} (line {line})"),
        },
        other => other,
    }
}

/// Reads a JSONL dataset, one record per non-blank line.
pub fn read_records(reader: impl BufRead) -> Result<Vec<RawCompanyRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(record_from_json(&v).map_err(|e| with_line(line_no, e))?);
    }
    Ok(out)
}

pub fn write_records(mut w: impl Write, records: &[RawCompanyRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<RawCompanyRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(f))
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[RawCompanyRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_records(&mut w, records)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(month: &str) -> String {
        format!(
            r#"{{"company_id":"c1","investor_group_id":"g1","label_vc":1,"label_gc":0,"observations":[{{"month":"{month}","features":{{"round_type":"Seed","total_funding":1000000,"valuation":null}}}}]}}"#
        )
    }

    #[test]
    fn month_parsing() {
        assert_eq!("2020-01".parse::<Month>().unwrap(), Month::new(2020, 1).unwrap());
        assert!("2020-13".parse::<Month>().is_err());
        assert!("2020-00".parse::<Month>().is_err());
        assert!("2020-1".parse::<Month>().is_err());
        assert!("20-01".parse::<Month>().is_err());
        let m = Month::new(2020, 12).unwrap();
        assert_eq!(m.plus(1).to_string(), "2021-01");
        assert_eq!(m.plus(-12).to_string(), "2019-12");
    }

    #[test]
    fn parses_valid_line_and_drops_nulls() {
        let recs = read_records(line("2020-03").as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        let f = &recs[0].observations[0].features;
        assert_eq!(f.len(), 2);
        assert_eq!(f["round_type"], FeatureValue::Text("Seed".into()));
    }

    #[test]
    fn invalid_month_is_a_validation_error() {
        let err = read_records(line("2020-13").as_bytes()).unwrap_err();
        match err {
            Error::Validation { field, message } => {
                assert_eq!(field, "observations[0].month");
                assert!(message.contains("line 1"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_company_id_is_rejected() {
        let l = r#"{"investor_group_id":"g","label_vc":0,"label_gc":0,"observations":[]}"#;
        match read_records(l.as_bytes()).unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "company_id"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", line("2020-01"));
        match read_records(text.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_unknown_feature_and_wrong_kind() {
        let l = r#"{"company_id":"c","investor_group_id":"g","label_vc":0,"label_gc":0,"observations":[{"month":"2020-01","features":{"n_unicorns":3}}]}"#;
        assert!(matches!(read_records(l.as_bytes()), Err(Error::Validation { .. })));
        let l = r#"{"company_id":"c","investor_group_id":"g","label_vc":0,"label_gc":0,"observations":[{"month":"2020-01","features":{"round_type":3}}]}"#;
        assert!(matches!(read_records(l.as_bytes()), Err(Error::Validation { .. })));
        let l = r#"{"company_id":"c","investor_group_id":"g","label_vc":0,"label_gc":0,"observations":[{"month":"2020-01","features":{"n_news":-2}}]}"#;
        assert!(matches!(read_records(l.as_bytes()), Err(Error::Validation { .. })));
    }

    #[test]
    fn unsorted_months_rejected() {
        let l = r#"{"company_id":"c","investor_group_id":"g","label_vc":0,"label_gc":0,"observations":[{"month":"2020-02","features":{}},{"month":"2020-01","features":{}}]}"#;
        match read_records(l.as_bytes()).unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "observations[1].month"),
            e => panic!("unexpected {e}"),
        }
    }
}
