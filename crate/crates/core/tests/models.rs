use std::time::Instant;

use tmtsc_core::data::{CategoryVocabulary, N_FEATURES};
use tmtsc_core::models::baselines::sinusoidal_encoding;
use tmtsc_core::models::encoder::gru_param_count;
use tmtsc_core::models::{load_checkpoint, save_checkpoint, Batch, BatchLoss, Model, ModelConfig, ModelKind};
use tmtsc_core::numerics::{grad_check, GradCheckOptions, Mode, Rng, Tape};
use tmtsc_core::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_blocks: 2,
        ff_dim: 32,
        embedding_dim: 4,
        vocab_size: 8,
        gru_hidden: 8,
        ugru_hidden: 3,
        ..Default::default()
    }
}

/// Random left-padded batch with at least one valid step per sample.
fn random_batch(b: usize, t: usize, vocab: usize, seed: u64) -> Batch {
    let mut rng = Rng::new(seed);
    let mut x = Vec::with_capacity(b * t * N_FEATURES);
    let mut mask = Vec::with_capacity(b * t);
    let mut labels = Vec::with_capacity(b);
    for bi in 0..b {
        let valid = rng.int_range(1, t as i64) as usize;
        for ti in 0..t {
            let on = ti >= t - valid;
            mask.push(on);
            x.push(if on { rng.int_range(0, vocab as i64 - 1) as f64 } else { 1.0 });
            for _ in 1..N_FEATURES {
                x.push(if on { rng.normal(0.5, 1.0) } else { -1.0 });
            }
        }
        labels.push((bi % 2) as f64);
    }
    Batch::new(b, t, x, mask, labels).unwrap()
}

fn probs(model: &Model, batch: &Batch, mode: Mode, seed: u64) -> Vec<f64> {
    let mut tape = Tape::new(&model.store);
    let mut rng = Rng::new(seed);
    let y = model.forward(&mut tape, batch, mode, &mut rng).unwrap();
    tape.value(y).data().to_vec()
}

fn set_param(model: &mut Model, name: &str, f: impl Fn(usize, f64) -> f64) {
    let p = model.store.by_name_mut(name).unwrap();
    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
        *v = f(i, *v);
    }
}

#[test]
fn rows_sum_to_one_for_every_model_and_mode() {
    for kind in ModelKind::ALL {
        let model = Model::init(kind, small_config(), 1).unwrap();
        for (i, mode) in [Mode::Train, Mode::Eval].into_iter().enumerate() {
            let batch = random_batch(5, 24, 8, 10 + i as u64);
            let p = probs(&model, &batch, mode, 3);
            assert_eq!(p.len(), 10);
            for row in p.chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-9, "{kind}");
                assert!(row.iter().all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn eval_forward_is_bit_deterministic() {
    for kind in ModelKind::ALL {
        let model = Model::init(kind, small_config(), 2).unwrap();
        let batch = random_batch(3, 24, 8, 4);
        assert_eq!(probs(&model, &batch, Mode::Eval, 0), probs(&model, &batch, Mode::Eval, 99));
    }
}

#[test]
fn zero_positional_encoding_leaves_projection_unchanged() {
    let mut model = Model::init(ModelKind::Tmtsc, small_config(), 5).unwrap();
    let batch = random_batch(3, 24, 8, 6);
    let run = |model: &Model| {
        let mut tape = Tape::new(&model.store);
        let tr = model.trace(&mut tape, &batch, Mode::Eval, &mut Rng::new(0)).unwrap();
        (tape.value(tr.h).clone(), tape.value(tr.h_prime).clone())
    };
    let (h, hp) = run(&model);
    assert_ne!(h, hp);
    set_param(&mut model, "pos", |_, _| 0.0);
    let (h, hp) = run(&model);
    assert_eq!(h, hp);
}

/// Permutes the steps of a one-sample batch and the matching column
/// blocks of the TMTSC head.
fn permuted(model: &Model, batch: &Batch, perm: &[usize]) -> (Model, Batch) {
    let t = batch.t;
    let d = model.config.d_model;
    let mut x = Vec::new();
    let mut mask = Vec::new();
    for &src in perm {
        x.extend_from_slice(&batch.x[src * N_FEATURES..(src + 1) * N_FEATURES]);
        mask.push(batch.mask[src]);
    }
    let pb = Batch::new(1, t, x, mask, batch.labels.clone()).unwrap();
    let mut pm = model.clone();
    let w = model.store.by_name("head.w").unwrap().value.clone();
    let cols = t * d;
    set_param(&mut pm, "head.w", |i, _| {
        let (c, j) = (i / cols, i % cols);
        let (step, k) = (j / d, j % d);
        w.data()[c * cols + perm[step] * d + k]
    });
    let pos = model.store.by_name("pos").unwrap().value.clone();
    set_param(&mut pm, "pos", |i, _| pos.data()[perm[i / d] * d + i % d]);
    (pm, pb)
}

#[test]
fn permutation_equivariance_with_zero_positions() {
    let mut model = Model::init(ModelKind::Tmtsc, small_config(), 7).unwrap();
    // larger head weights so differences would show
    set_param(&mut model, "head.w", |_, v| v * 20.0);
    let mut rng = Rng::new(8);
    for trial in 0..5 {
        let batch = random_batch(1, 24, 8, 100 + trial);
        let mut perm: Vec<usize> = (0..24).collect();
        rng.shuffle(&mut perm);

        let mut zero_p = model.clone();
        set_param(&mut zero_p, "pos", |_, _| 0.0);
        let (pm, pb) = permuted(&zero_p, &batch, &perm);
        let a = probs(&zero_p, &batch, Mode::Eval, 0);
        let b = probs(&pm, &pb, Mode::Eval, 0);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn learnable_positions_break_permutation_symmetry() {
    let mut model = Model::init(ModelKind::Tmtsc, small_config(), 9).unwrap();
    set_param(&mut model, "pos", |_, v| v * 100.0);
    set_param(&mut model, "head.w", |_, v| v * 20.0);
    let batch = random_batch(1, 24, 8, 3);
    let mut perm: Vec<usize> = (0..24).collect();
    perm.reverse();
    // the head is permuted too, but the positional table stays put
    let (mut pm, pb) = permuted(&model, &batch, &perm);
    let pos = model.store.by_name("pos").unwrap().value.clone();
    set_param(&mut pm, "pos", |i, _| pos.data()[i]);
    let a = probs(&model, &batch, Mode::Eval, 0);
    let b = probs(&pm, &pb, Mode::Eval, 0);
    assert!((a[1] - b[1]).abs() > 1e-6, "{a:?} vs {b:?}");
}

#[test]
fn padded_step_content_does_not_reach_the_output() {
    let model = Model::init(ModelKind::Tmtsc, small_config(), 11).unwrap();
    let batch = random_batch(4, 24, 8, 12);
    let mut altered = batch.clone();
    let mut rng = Rng::new(13);
    for (i, &m) in batch.mask.iter().enumerate() {
        if !m {
            altered.x[i * N_FEATURES] = rng.int_range(0, 7) as f64;
            for k in 1..N_FEATURES {
                altered.x[i * N_FEATURES + k] = rng.normal(0.0, 50.0);
            }
        }
    }
    assert_ne!(batch.x, altered.x);
    for mode in [Mode::Eval, Mode::Train] {
        assert_eq!(probs(&model, &batch, mode, 1), probs(&model, &altered, mode, 1));
    }
}

#[test]
fn mgru_ignores_masked_trailing_steps() {
    let model = Model::init(ModelKind::Mgru, small_config(), 14).unwrap();
    let short = random_batch(3, 10, 8, 15);
    let short = Batch::new(3, 10, short.x, vec![true; 30], short.labels).unwrap();
    let (mut x, mut mask) = (Vec::new(), Vec::new());
    let mut rng = Rng::new(16);
    for b in 0..3 {
        for t in 0..14 {
            if t < 10 {
                x.extend_from_slice(&short.x[(b * 10 + t) * N_FEATURES..(b * 10 + t + 1) * N_FEATURES]);
                mask.push(true);
            } else {
                x.push(0.0);
                x.extend((1..N_FEATURES).map(|_| rng.normal(0.0, 3.0)));
                mask.push(false);
            }
        }
    }
    let long = Batch::new(3, 14, x, mask, short.labels.clone()).unwrap();
    let a = probs(&model, &short, Mode::Eval, 0);
    let b = probs(&model, &long, Mode::Eval, 0);
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn parameter_counts_match_closed_forms() {
    let cfg = ModelConfig::default();
    let tm = Model::init(ModelKind::Tmtsc, cfg.clone(), 0).unwrap();
    let head: usize = tm
        .store
        .iter()
        .filter(|p| p.name.starts_with("head."))
        .map(|p| p.value.len())
        .sum();
    assert_eq!(head, 24 * 64 * 2 + 2);
    assert_eq!(head, 3074);

    let block_count = |m: &Model| -> usize {
        m.store
            .iter()
            .filter(|p| p.trainable && p.name.starts_with("block"))
            .map(|p| p.value.len())
            .sum()
    };
    for kind in [ModelKind::Tmtsc, ModelKind::Te] {
        let a = Model::init(kind, ModelConfig { n_blocks: 2, ..cfg.clone() }, 0).unwrap();
        let b = Model::init(kind, ModelConfig { n_blocks: 4, ..cfg.clone() }, 0).unwrap();
        assert_eq!(2 * block_count(&a), block_count(&b));
        assert_eq!(b.count_params() - a.count_params(), block_count(&a));
    }

    let (d, f) = (cfg.d_model, cfg.ff_dim);
    let block = 3 * d * d + 2 * d + d * d + d + 2 * (f * d) + f + d + 2 * 2 * d;
    let tmtsc = cfg.vocab_size * cfg.embedding_dim
        + d * cfg.input_width()
        + d
        + 24 * d
        + cfg.n_blocks * block
        + 3074;
    assert_eq!(tm.count_params(), tmtsc);

    let h = cfg.ugru_hidden;
    let ugru = Model::init(ModelKind::Ugru, cfg.clone(), 0).unwrap();
    let bigru = |input| 2 * gru_param_count(input, h);
    assert_eq!(gru_param_count(1, h), 3 * (h + h * h + h));
    let expected = 15 * bigru(1) + bigru(cfg.embedding_dim) + cfg.vocab_size * cfg.embedding_dim + (16 * 2 * h) * 2 + 2;
    assert_eq!(ugru.count_params(), expected);
    assert_eq!(ugru.store.iter().filter(|p| p.name.ends_with(".fwd.w_r")).count(), 16);

    let mg = Model::init(ModelKind::Mgru, cfg.clone(), 0).unwrap();
    let hm = cfg.gru_hidden;
    assert_eq!(
        mg.count_params(),
        cfg.vocab_size * cfg.embedding_dim + 2 * gru_param_count(cfg.input_width(), hm) + 2 * hm * 2 + 2
    );

    assert_eq!(tmtsc_core::numerics::ParamStore::new().count_trainable(), 0);
}

#[test]
fn init_is_seeded_and_follows_the_scheme() {
    let a = Model::init(ModelKind::Tmtsc, small_config(), 21).unwrap();
    let b = Model::init(ModelKind::Tmtsc, small_config(), 21).unwrap();
    let c = Model::init(ModelKind::Tmtsc, small_config(), 22).unwrap();
    assert_eq!(a.store, b.store);
    assert_ne!(a.store, c.store);
    for p in a.store.iter() {
        let d = p.value.data();
        if p.name.ends_with(".gamma") || p.name.ends_with("running_var") {
            assert!(d.iter().all(|&v| v == 1.0), "{}", p.name);
        } else if p.name.ends_with(".beta") || p.name.ends_with("running_mean") || p.name.contains(".b") {
            assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
        } else {
            assert!(d.iter().all(|&v| v != 0.0), "{}", p.name);
            let std = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
            if d.len() > 200 {
                assert!((std - 0.02).abs() < 0.004, "{} std {std}", p.name);
            }
        }
    }
    assert!(a.store.by_name("pos").unwrap().value.data().iter().any(|&v| v != 0.0));
    assert!(!a.store.by_name("block0.norm1.running_mean").unwrap().trainable);
}

#[test]
fn sinusoidal_table_values() {
    let pe = sinusoidal_encoding(24, 16);
    assert_eq!(pe.row(0)[0], 0.0);
    assert_eq!(pe.row(0)[1], 1.0);
    assert!((pe.row(3)[0] - 3f64.sin()).abs() < 1e-15);
    assert!((pe.row(3)[3] - (3.0 / 10000f64.powf(2.0 / 16.0)).cos()).abs() < 1e-15);
}

#[test]
fn batch_rejects_bad_vocabulary_ids() {
    let model = Model::init(ModelKind::Tmtsc, small_config(), 0).unwrap();
    let mut batch = random_batch(2, 24, 8, 0);
    batch.x[23 * N_FEATURES] = 8.0;
    let mut tape = Tape::new(&model.store);
    let r = model.forward(&mut tape, &batch, Mode::Eval, &mut Rng::new(0));
    assert!(matches!(r, Err(Error::Vocabulary { id: 8, size: 8 })));
    let short = random_batch(2, 20, 8, 0);
    let mut tape = Tape::new(&model.store);
    assert!(matches!(
        model.forward(&mut tape, &short, Mode::Eval, &mut Rng::new(0)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = CategoryVocabulary::new("round_type", vec!["Seed".into(), "Series A".into()]);
    for kind in ModelKind::ALL {
        let mut model = Model::init(kind, small_config(), 31).unwrap();
        set_param(&mut model, "head.b", |i, _| 0.1 + i as f64 / 3.0);
        let path = dir.path().join(kind.to_string());
        save_checkpoint(&path, &model, &vocab).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model.store, model.store);
        assert_eq!(ck.model.kind, kind);
        assert_eq!(ck.vocabulary, vocab);
        let batch = random_batch(2, 24, 8, 1);
        assert_eq!(probs(&ck.model, &batch, Mode::Eval, 0), probs(&model, &batch, Mode::Eval, 0));
        let bytes = std::fs::read(path.join("params.bin")).unwrap();
        save_checkpoint(&path, &ck.model, &vocab).unwrap();
        assert_eq!(bytes, std::fs::read(path.join("params.bin")).unwrap());
    }
}

#[test]
fn checkpoint_with_foreign_schema_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(ModelKind::Mgru, small_config(), 0).unwrap();
    let vocab = CategoryVocabulary::new("round_type", vec![]);
    save_checkpoint(dir.path(), &model, &vocab).unwrap();
    let man = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&man).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["schema_hash"] = "0000000000000000".into();
    std::fs::write(&man, v.to_string()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::SchemaMismatch { .. })));
}

#[test]
fn gradients_match_finite_differences_for_every_model() {
    let start = Instant::now();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_blocks: 2,
        ff_dim: 32,
        ..Default::default()
    };
    for kind in ModelKind::ALL {
        let model = Model::init(kind, cfg.clone(), 41).unwrap();
        let batch = random_batch(4, 24, cfg.vocab_size, 42);
        let obj = BatchLoss { model: &model, batch: &batch };
        let report = grad_check(&model.store, &obj, &GradCheckOptions::default()).unwrap();
        let worst = report.worst().unwrap();
        assert!(
            report.max_rel_error() < 1e-6,
            "{kind}: {} rel {} pair {:?}",
            worst.name,
            worst.max_rel_error,
            worst.worst_pair
        );
        let trainable = model.store.iter().filter(|p| p.trainable).count();
        assert_eq!(report.params.len(), trainable);
        eprintln!("{kind}: {} tensors, max rel {:.2e}, {:?}", trainable, report.max_rel_error(), start.elapsed());
    }
}
