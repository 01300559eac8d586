use std::collections::BTreeSet;

use proptest::prelude::*;
use tmtsc_core::data::{
    fill_sentinel_and_pad, impute_total_funding, investor_centric_split, log_scale, prepare, read_records,
    write_records, EncodedGrid, InvestorGroup, SplitFractions, Task, N_FEATURES, SENTINEL, SEQ_LEN,
};
use tmtsc_core::synthetic::{generate, SynthConfig};
use tmtsc_core::Error;

#[derive(Clone, Debug)]
struct Item(String);

impl InvestorGroup for Item {
    fn investor_group(&self) -> &str {
        &self.0
    }
}

fn groups<T: InvestorGroup>(part: &[T]) -> BTreeSet<String> {
    part.iter().map(|i| i.investor_group().to_string()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_never_shares_a_group(
        sizes in prop::collection::vec(1usize..6, 3..60),
        seed in any::<u64>(),
        val in prop::sample::select(vec![0.0, 0.1, 0.15, 0.3]),
    ) {
        let items: Vec<Item> = sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &n)| std::iter::repeat_n(Item(format!("g{g}")), n))
            .collect();
        let total = items.len();
        let f = SplitFractions::new(0.7, val, 0.3 - val).unwrap();
        let s = investor_centric_split(items, f, seed).unwrap();
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), total);
        let (a, b, c) = (groups(&s.train), groups(&s.validation), groups(&s.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        prop_assert_eq!(a.len() + b.len() + c.len(), sizes.len());
        if val == 0.0 {
            prop_assert!(s.validation.is_empty());
        }
    }

    #[test]
    fn total_funding_imputation_is_idempotent_and_monotone(
        steps in prop::collection::vec(prop::option::of(0.0f64..1e6), 1..40),
    ) {
        // cumulative input: observed values non-decreasing
        let mut acc = 0.0;
        let series: Vec<Option<f64>> = steps.iter().map(|s| s.map(|d| { acc += d; acc })).collect();
        let once = impute_total_funding(&series);
        let twice = impute_total_funding(&once.iter().map(|&v| Some(v)).collect::<Vec<_>>());
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn log_scale_is_strictly_increasing(a in 0.0f64..1e12, d in 1e-3f64..1e6) {
        prop_assert!(log_scale(a).unwrap() < log_scale(a + d).unwrap());
    }

    #[test]
    fn padded_grids_have_fixed_length_and_exact_mask(
        rows in prop::collection::vec(prop::collection::vec(prop::option::of(0.0f64..30.0), N_FEATURES), 1..40),
    ) {
        let grid = EncodedGrid { rows: rows.iter().map(|r| std::array::from_fn(|k| r[k])).collect() };
        let p = fill_sentinel_and_pad(&grid, SEQ_LEN);
        prop_assert_eq!(p.x.len(), SEQ_LEN);
        let kept = rows.len().min(SEQ_LEN);
        let pad = SEQ_LEN - kept;
        for t in 0..SEQ_LEN {
            let src = (t >= pad).then(|| &rows[rows.len() - kept + t - pad]);
            for k in 0..N_FEATURES {
                let obs = src.and_then(|r| r[k]);
                prop_assert_eq!(p.cell_observed[t][k], obs.is_some());
                if k > 0 {
                    prop_assert_eq!(p.x[t][k], obs.unwrap_or(SENTINEL));
                }
            }
            prop_assert_eq!(p.step_valid[t], src.is_some_and(|r| r.iter().any(Option::is_some)));
        }
    }
}

#[test]
fn log_scale_reference_values() {
    assert_eq!(log_scale(0.0).unwrap(), 0.0);
    assert!((log_scale(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-15);
    assert!((log_scale(2e11).unwrap() - 26.0216).abs() < 1e-4);
    assert!(matches!(log_scale(-1.0), Err(Error::Domain(_))));
}

#[test]
fn jsonl_round_trip_of_synthetic_records() {
    let records = generate(&SynthConfig {
        n_companies: 100,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_records(&mut buf, &records).unwrap();
    assert_eq!(read_records(buf.as_slice()).unwrap(), records);
}

#[test]
fn malformed_input_reports_line_and_field() {
    let good = r#"{"company_id":"a","investor_group_id":"g","label_vc":1,"label_gc":0,"observations":[{"month":"2020-01","features":{}}]}"#;
    let text = format!("{good}\n{{not json\n");
    assert!(matches!(read_records(text.as_bytes()), Err(Error::Parse { line: 2, .. })));

    let no_id = r#"{"investor_group_id":"g","label_vc":1,"label_gc":0,"observations":[]}"#;
    match read_records(no_id.as_bytes()) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "company_id"),
        other => panic!("{other:?}"),
    }

    let bad_month = good.replace("2020-01", "2020-13");
    assert!(matches!(read_records(bad_month.as_bytes()), Err(Error::Validation { .. })));
}

#[test]
fn prepared_panels_are_deterministic_and_valid() {
    let records = generate(&SynthConfig {
        n_companies: 300,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let f: SplitFractions = "0.73/0.13/0.14".parse().unwrap();
    let a = prepare(records.clone(), Task::Gc, f, 2).unwrap();
    let b = prepare(records, Task::Gc, f, 2).unwrap();
    assert_eq!(a.split, b.split);
    for p in a.split.train.iter().chain(&a.split.validation).chain(&a.split.test) {
        p.validate().unwrap();
        assert!(p.mask[SEQ_LEN - 1]);
        assert!(p.x[0][0] < a.vocab.size() as f64);
    }
}
