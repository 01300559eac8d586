//! Investor-grouped train/validation/test partition.
//!
//! Companies sharing an investor group always land in the same part, so
//! no investor's portfolio leaks between training and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::panel::CompanyPanel;
use super::record::RawCompanyRecord;
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub trait InvestorGroup {
    fn investor_group(&self) -> &str;
}

impl InvestorGroup for CompanyPanel {
    fn investor_group(&self) -> &str {
        &self.investor_group_id
    }
}

impl InvestorGroup for RawCompanyRecord {
    fn investor_group(&self) -> &str {
        &self.investor_group_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = Self {
            train,
            validation,
            test,
        };
        let parts = f.as_array();
        if parts.iter().any(|v| !(0.0..=1.0).contains(v)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {train}/{validation}/{test} must be in [0,1] and sum to 1"
            )));
        }
        Ok(f)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

impl std::str::FromStr for SplitFractions {
    type Err = Error;

    /// Parses `train/val/test`, e.g. `0.73/0.13/0.14`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split('/')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad split `{s}`: {e}")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::Config(format!("split `{s}` needs three parts"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub split_seed: u64,
}

/// Shuffles group keys with `seed`, then hands each whole group to the part
/// furthest below its target sample count.
pub fn investor_centric_split<T: InvestorGroup>(
    items: Vec<T>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    let targets = fractions.as_array();
    let active: Vec<usize> = (0..3).filter(|&i| targets[i] > 0.0).collect();

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(it.investor_group().to_string()).or_default().push(i);
    }
    if groups.len() < active.len() {
        return Err(Error::SplitInfeasible(format!(
            "{} investor groups cannot fill {} non-empty parts",
            groups.len(),
            active.len()
        )));
    }
    let mut keys: Vec<&String> = groups.keys().collect();
    Rng::new(seed).shuffle(&mut keys);

    let n = items.len() as f64;
    let mut counts = [0usize; 3];
    let mut assigned: Vec<Vec<&String>> = vec![Vec::new(); 3];
    for key in keys {
        let size = groups[key].len();
        let part = *active
            .iter()
            .max_by(|&&a, &&b| {
                let da = targets[a] * n - counts[a] as f64;
                let db = targets[b] * n - counts[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        counts[part] += size;
        assigned[part].push(key);
    }
    // every requested part must receive at least one group
    for &p in &active {
        if assigned[p].is_empty() {
            let donor = *active
                .iter()
                .filter(|&&q| assigned[q].len() > 1)
                .max_by_key(|&&q| counts[q])
                .expect("more groups than parts");
            let (pos, _) = assigned[donor]
                .iter()
                .enumerate()
                .min_by_key(|(_, k)| groups[**k].len())
                .unwrap();
            let key = assigned[donor].remove(pos);
            counts[donor] -= groups[key].len();
            counts[p] += groups[key].len();
            assigned[p].push(key);
        }
    }

    let mut part_of = vec![0usize; items.len()];
    for (p, keys) in assigned.iter().enumerate() {
        for k in keys {
            for &i in &groups[*k] {
                part_of[i] = p;
            }
        }
    }
    let mut parts: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, it) in items.into_iter().enumerate() {
        parts[part_of[i]].push(it);
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        split_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Item(String, usize);

    impl InvestorGroup for Item {
        fn investor_group(&self) -> &str {
            &self.0
        }
    }

    fn groups_of(v: &[Item]) -> HashSet<String> {
        v.iter().map(|i| i.0.clone()).collect()
    }

    #[test]
    fn ten_groups_two_parts() {
        let items: Vec<Item> = (0..50).map(|i| Item(format!("g{}", i % 10), i)).collect();
        let s = investor_centric_split(items, SplitFractions::new(0.8, 0.0, 0.2).unwrap(), 3).unwrap();
        assert!(s.validation.is_empty());
        assert!(!s.train.is_empty() && !s.test.is_empty());
        assert!(groups_of(&s.train).is_disjoint(&groups_of(&s.test)));
        assert_eq!(s.train.len() + s.test.len(), 50);
    }

    #[test]
    fn singleton_groups_hit_targets() {
        let items: Vec<Item> = (0..100).map(|i| Item(format!("g{i}"), i)).collect();
        let s = investor_centric_split(items, SplitFractions::new(0.7, 0.15, 0.15).unwrap(), 11).unwrap();
        assert!((s.train.len() as i64 - 70).abs() <= 1);
        assert!((s.validation.len() as i64 - 15).abs() <= 1);
        assert!((s.test.len() as i64 - 15).abs() <= 1);
    }

    #[test]
    fn big_group_stays_whole() {
        let mut items: Vec<Item> = (0..50).map(|i| Item("big".into(), i)).collect();
        items.extend((50..100).map(|i| Item(format!("g{i}"), i)));
        for seed in 0..10 {
            let s = investor_centric_split(items.clone(), SplitFractions::new(0.7, 0.15, 0.15).unwrap(), seed)
                .unwrap();
            let holders = [&s.train, &s.validation, &s.test]
                .iter()
                .filter(|p| p.iter().any(|i| i.0 == "big"))
                .count();
            assert_eq!(holders, 1);
            let big_part = [&s.train, &s.validation, &s.test]
                .into_iter()
                .find(|p| p.iter().any(|i| i.0 == "big"))
                .unwrap();
            assert_eq!(big_part.iter().filter(|i| i.0 == "big").count(), 50);
        }
    }

    #[test]
    fn infeasible_split() {
        let items = vec![Item("a".into(), 0), Item("b".into(), 1)];
        let r = investor_centric_split(items, SplitFractions::new(0.5, 0.25, 0.25).unwrap(), 0);
        assert!(matches!(r, Err(Error::SplitInfeasible(_))));
    }

    #[test]
    fn deterministic() {
        let items: Vec<Item> = (0..200).map(|i| Item(format!("g{}", i % 37), i)).collect();
        let f = SplitFractions::new(0.7, 0.15, 0.15).unwrap();
        let a = investor_centric_split(items.clone(), f, 5).unwrap();
        let b = investor_centric_split(items, f, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parses_fraction_string() {
        let f: SplitFractions = "0.73/0.13/0.14".parse().unwrap();
        assert_eq!(f.train, 0.73);
        assert!("0.5/0.5".parse::<SplitFractions>().is_err());
        assert!("0.5/0.6/0.1".parse::<SplitFractions>().is_err());
    }
}
