use proptest::prelude::*;
use tmtsc_core::evaluation::{
    accuracy_precision, aggregate, auc_roc, evaluate_runs, roc_curve, trapezoid_area, write_roc_csv, RunScores,
};
use tmtsc_core::numerics::Rng;

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Scores on a coarse grid so ties are common, with both classes present.
fn instance(rng: &mut Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.int_range(2, 50) as usize;
    let levels = rng.int_range(1, 12);
    let scores: Vec<f64> = (0..n).map(|_| rng.int_range(0, levels) as f64 / levels as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect();
    labels[0] = 0;
    labels[1] = 1;
    (scores, labels)
}

#[test]
fn auc_matches_pairwise_oracle_on_200_instances() {
    let mut rng = Rng::new(17);
    for _ in 0..200 {
        let (s, y) = instance(&mut rng);
        let auc = auc_roc(&s, &y).unwrap();
        assert!((auc - pairwise_auc(&s, &y)).abs() <= 1e-12);
        let area = trapezoid_area(&roc_curve(&s, &y).unwrap());
        assert!((area - auc).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transform(seed in any::<u64>()) {
        let (s, y) = instance(&mut Rng::new(seed));
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(auc_roc(&s, &y).unwrap(), auc_roc(&t, &y).unwrap());
    }

    #[test]
    fn metrics_invariant_under_paired_permutation(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (s, y) = instance(&mut rng);
        let mut idx: Vec<usize> = (0..s.len()).collect();
        rng.shuffle(&mut idx);
        let ps: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let py: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(accuracy_precision(&s, &y, 0.5).unwrap(), accuracy_precision(&ps, &py, 0.5).unwrap());
        prop_assert_eq!(auc_roc(&s, &y).unwrap(), auc_roc(&ps, &py).unwrap());
    }

    #[test]
    fn roc_is_monotone_with_endpoints(seed in any::<u64>()) {
        let (s, y) = instance(&mut Rng::new(seed));
        let c = roc_curve(&s, &y).unwrap();
        prop_assert_eq!((c[0].fpr, c[0].tpr), (0.0, 0.0));
        let last = c.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        prop_assert!(c.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }
}

#[test]
fn deterministic_model_has_zero_spread() {
    let report = evaluate_runs(5, 0.5, |_| {
        Ok(RunScores {
            scores: vec![0.2, 0.7, 0.6, 0.4],
            labels: vec![0, 1, 0, 1],
        })
    })
    .unwrap();
    assert_eq!(report.per_seed.len(), 5);
    assert_eq!(report.accuracy.std, 0.0);
    assert_eq!(report.auc_roc.std, 0.0);
    assert_eq!(report.precision.unwrap().std, 0.0);
    assert_eq!((report.n_test, report.n_positive), (4, 2));
}

#[test]
fn aggregate_uses_sample_std() {
    let runs: Vec<_> = [0.6, 0.8]
        .iter()
        .enumerate()
        .map(|(i, &a)| tmtsc_core::evaluation::SeedMetrics {
            seed: i as u64,
            accuracy: a,
            precision: None,
            auc_roc: a,
        })
        .collect();
    let r = aggregate(runs, 10, 5, 0.5);
    assert!((r.accuracy.mean - 0.7).abs() < 1e-15);
    assert!((r.accuracy.std - 0.02f64.sqrt()).abs() < 1e-15);
    assert!(r.precision.is_none());
}

#[test]
fn roc_csv_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roc.csv");
    write_roc_csv(&path, &roc_curve(&[0.1, 0.9], &[0, 1]).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("fpr,tpr,threshold\n"));
    assert_eq!(text.lines().count(), 5);
}
