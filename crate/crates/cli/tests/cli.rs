use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const EXPERIMENT: &str = "[model]\nd_model = 8\nn_heads = 2\nn_blocks = 1\nff_dim = 16\ngru_hidden = 8\nugru_hidden = 2\n\
                          [train]\nbatch_size = 32\nmax_epochs = 3\n";

fn tmtsc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmtsc"))
        .current_dir(dir)
        .env_remove("TMTSC_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tmtsc(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// synth → prepare → train → eval → simulate → bench in `dir`.
fn pipeline(dir: &Path) -> Vec<PathBuf> {
    std::fs::write(dir.join("synth.toml"), "n_companies = 200\nseed = 3\n").unwrap();
    std::fs::write(dir.join("exp.toml"), EXPERIMENT).unwrap();
    ok(dir, &["synth", "--config", "synth.toml", "--out", "data.jsonl"]);
    ok(dir, &["prepare", "--data", "data.jsonl", "--task", "vc", "--split", "0.7/0.15/0.15", "--seed", "1", "--out", "panels"]);
    ok(dir, &["train", "--panels", "panels", "--model", "tmtsc", "--config", "exp.toml", "--out", "ck_tmtsc"]);
    ok(dir, &["train", "--panels", "panels", "--model", "mgru", "--config", "exp.toml", "--out", "ck_mgru"]);
    ok(dir, &["eval", "--panels", "panels", "--checkpoint", "ck_tmtsc", "--seeds", "2", "--out", "eval"]);
    ok(dir, &["simulate", "--panels", "panels", "--checkpoints", "ck_tmtsc", "ck_mgru", "--sizes", "5,10", "--repeats", "20", "--out", "sim.csv"]);
    ok(dir, &["bench", "--panels", "panels", "--config", "exp.toml", "--steps", "2", "--batch-size", "16", "--out", "bench.csv"]);
    [
        "data.jsonl",
        "data.jsonl.manifest.json",
        "panels/train.jsonl",
        "panels/validation.jsonl",
        "panels/test.jsonl",
        "panels/vocab.json",
        "panels/panels.json",
        "panels/run_manifest.json",
        "ck_tmtsc/manifest.json",
        "ck_tmtsc/params.bin",
        "ck_tmtsc/train_report.json",
        "ck_tmtsc/experiment.json",
        "ck_tmtsc/run_manifest.json",
        "eval/metrics.json",
        "eval/roc.csv",
        "eval/run_manifest.json",
        "sim.csv",
        "sim.csv.manifest.json",
        "bench.csv",
        "bench.csv.manifest.json",
    ]
    .iter()
    .map(|p| dir.join(p))
    .collect()
}

#[test]
fn full_pipeline_runs_and_reruns_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = pipeline(a.path());
    for f in &files {
        assert!(f.exists(), "{} missing", f.display());
    }
    pipeline(b.path());
    for f in &files {
        let name = f.strip_prefix(a.path()).unwrap();
        let s = name.to_string_lossy();
        // timings live in manifests and in the benchmark itself
        if s.ends_with("manifest.json") && !s.starts_with("ck_tmtsc/manifest") || s.starts_with("bench") {
            continue;
        }
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{s}");
    }
    let sim = std::fs::read_to_string(a.path().join("sim.csv")).unwrap();
    assert!(sim.starts_with("model,portfolio_size,mean,std\n"));
    assert_eq!(sim.lines().count(), 5);
    let bench = std::fs::read_to_string(a.path().join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 5);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("eval/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn zero_validation_fraction_writes_no_validation_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "2", "--out", "data.jsonl"]);
    let out = ok(d, &["prepare", "--data", "data.jsonl", "--task", "gc", "--split", "0.8/0/0.2", "--out", "panels"]);
    assert!(!d.join("panels/validation.jsonl").exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation split is empty"));
}

#[test]
fn errors_have_categories_and_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.toml"), "n_companies = 150\n").unwrap();
    std::fs::write(d.join("exp.toml"), EXPERIMENT).unwrap();
    ok(d, &["synth", "--config", "synth.toml", "--out", "data.jsonl"]);
    ok(d, &["prepare", "--data", "data.jsonl", "--out", "panels"]);
    ok(d, &["train", "--panels", "panels", "--config", "exp.toml", "--out", "ck"]);

    let code = |out: Output, category: &str| {
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.lines().any(|l| l.starts_with(&format!("error[{category}]"))), "{err}");
        out.status.code().unwrap()
    };

    let missing = code(tmtsc(d, &["prepare", "--data", "nope.jsonl", "--out", "x"]), "missing-file");

    std::fs::write(d.join("bad.jsonl"), "{\"company_id\": 1}\n").unwrap();
    let schema = code(tmtsc(d, &["prepare", "--data", "bad.jsonl", "--out", "x"]), "schema-violation");

    let manifest = d.join("ck/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["schema_hash"] = "0000000000000000".into();
    std::fs::write(&manifest, v.to_string()).unwrap();
    let mismatch = code(tmtsc(d, &["eval", "--panels", "panels", "--checkpoint", "ck", "--out", "ev"]), "schema-mismatch");
    std::fs::write(&manifest, text).unwrap();

    std::fs::write(d.join("one.jsonl"), std::fs::read_to_string(d.join("data.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let split = code(tmtsc(d, &["prepare", "--data", "one.jsonl", "--out", "y"]), "infeasible-split");

    let size = code(
        tmtsc(d, &["simulate", "--panels", "panels", "--checkpoints", "ck", "--sizes", "100000", "--out", "s.csv"]),
        "infeasible-size",
    );

    std::fs::write(d.join("hot.toml"), format!("{EXPERIMENT}learning_rate = 1e300\n")).unwrap();
    let diverged = code(tmtsc(d, &["train", "--panels", "panels", "--config", "hot.toml", "--out", "ck2"]), "divergence");

    let mut codes = vec![missing, schema, mismatch, split, size, diverged];
    codes.sort();
    codes.dedup();
    assert_eq!(codes.len(), 6);
    assert!(codes.iter().all(|&c| c != 0));
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let expect: &[(&str, &[&str])] = &[
        ("synth", &["--config", "--seed", "--out"]),
        ("prepare", &["--data", "--task", "[default: vc]", "--split", "[default: 0.73/0.13/0.14]", "--seed", "[default: 0]", "--out"]),
        ("train", &["--panels", "--model", "[default: tmtsc]", "--config", "--seed", "--out"]),
        ("eval", &["--panels", "--checkpoint", "--seeds", "[default: 1]", "--threshold", "[default: 0.5]", "--out"]),
        ("simulate", &["--panels", "--checkpoints", "--sizes", "[default: 10,25,50,100]", "--repeats", "[default: 100]", "--out"]),
        ("bench", &["--panels", "--models", "[default: all]", "--steps", "[default: 50]", "--out"]),
    ];
    for (cmd, flags) in expect {
        let out = ok(dir.path(), &[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
    }
}
