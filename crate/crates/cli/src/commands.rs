use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tmtsc_core::data::{self, load_dataset, save_dataset, FeatureSchema};
use tmtsc_core::evaluation::{aggregate, roc_curve, seed_metrics, write_roc_csv, RunScores};
use tmtsc_core::models::{load_checkpoint, save_checkpoint, Batch, Model, ModelConfig, ModelKind};
use tmtsc_core::portfolio::{export_sim_csv, simulate as run_simulation, ModelScores, ReferenceLine, SimConfig};
use tmtsc_core::synthetic::{generate, SynthConfig};
use tmtsc_core::training::{benchmark_step_time, fit, read_config, relative_time_table, write_bench_csv, TrainConfig};
use tmtsc_core::{Error, Result};

use crate::cache::{CacheMeta, PanelCache};
use crate::manifest::{io, manifest_for_dir, manifest_for_file, Run};
use crate::{BenchArgs, EvalArgs, PrepareArgs, SimulateArgs, SynthArgs, TrainArgs};

/// Model and training settings read by `train` and `bench`; the training
/// half is stored next to each checkpoint so `eval` can retrain.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const EXPERIMENT: &str = "experiment.json";
const SCORE_BATCH: usize = 512;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io(path, e))
}

fn load_experiment(path: Option<&Path>) -> Result<Experiment> {
    path.map(read_config).transpose().map(Option::unwrap_or_default)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut run = Run::start("synth");
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => {
            run.input(p);
            read_config(p)?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    run.config(&cfg)?;
    run.seed(cfg.seed);
    let records = generate(&cfg)?;
    save_dataset(&a.out, &records)?;
    run.output(&a.out);
    run.finish(&manifest_for_file(&a.out))
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let mut run = Run::start("prepare");
    run.input(&a.data);
    run.config(&serde_json::json!({ "task": a.task, "split": a.split }))?;
    run.seed(a.seed);
    let records = load_dataset(&a.data)?;
    let prepared = data::prepare(records, a.task, a.split, a.seed)?;
    if prepared.split.validation.is_empty() {
        log::warn!("validation split is empty; no validation file written");
    }
    let split = prepared.split;
    let cache = PanelCache {
        meta: CacheMeta {
            task: a.task,
            schema_hash: FeatureSchema.hash(),
            split_seed: a.seed,
            n_train: split.train.len(),
            n_validation: split.validation.len(),
            n_test: split.test.len(),
        },
        vocab: prepared.vocab,
        train: split.train,
        validation: split.validation,
        test: split.test,
    };
    for p in cache.save(&a.out)? {
        run.output(&p);
    }
    run.finish(&manifest_for_dir(&a.out))
}

/// Trains `kind` on the cache; the vocabulary fixes the embedding size
/// and the cache fixes the task.
fn train_model(kind: ModelKind, cache: &PanelCache, exp: &Experiment) -> Result<(Model, tmtsc_core::training::TrainReport)> {
    let mut model_cfg = exp.model.clone();
    model_cfg.vocab_size = cache.vocab.size();
    let mut train_cfg = exp.train.clone();
    train_cfg.task = cache.meta.task;
    let mut model = Model::init(kind, model_cfg, train_cfg.seed)?;
    let report = fit(&mut model, &cache.train, &cache.validation, &train_cfg)?;
    Ok((model, report))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut run = Run::start("train");
    run.input(&a.panels);
    let mut exp = load_experiment(a.config.as_deref())?;
    if let Some(p) = &a.config {
        run.input(p);
    }
    if let Some(seed) = a.seed {
        exp.train.seed = seed;
    }
    let cache = PanelCache::load(&a.panels)?;
    exp.model.vocab_size = cache.vocab.size();
    exp.train.task = cache.meta.task;
    run.config(&serde_json::json!({ "model": a.model, "experiment": exp }))?;
    run.seed(exp.train.seed);

    let start = Instant::now();
    let (model, report) = train_model(a.model, &cache, &exp)?;
    run.timing("train_seconds", start.elapsed().as_secs_f64());
    run.timing("seconds_per_step", report.seconds_per_step);

    create_dir(&a.out)?;
    save_checkpoint(&a.out, &model, &cache.vocab)?;
    let outputs = [
        a.out.join("manifest.json"),
        a.out.join("params.bin"),
        a.out.join("train_report.json"),
        a.out.join(EXPERIMENT),
    ];
    report.write_json(&outputs[2])?;
    write_json(&outputs[3], &exp)?;
    for p in &outputs {
        run.output(p);
    }
    run.finish(&manifest_for_dir(&a.out))
}

fn labels(panels: &[data::CompanyPanel]) -> Vec<u8> {
    panels.iter().map(|p| p.y).collect()
}

fn load_matching(checkpoint: &Path, cache: &PanelCache) -> Result<Model> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.vocabulary != cache.vocab {
        return Err(Error::Config(format!(
            "{} was trained with a different category vocabulary than the panels",
            checkpoint.display()
        )));
    }
    Ok(ck.model)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut run = Run::start("eval");
    run.input(&a.panels);
    run.input(&a.checkpoint);
    run.config(&serde_json::json!({ "seeds": a.seeds, "threshold": a.threshold }))?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let cache = PanelCache::load(&a.panels)?;
    let model = load_matching(&a.checkpoint, &cache)?;
    let y = labels(&cache.test);
    let first = RunScores {
        scores: model.scores(&cache.test, SCORE_BATCH)?,
        labels: y.clone(),
    };

    let mut per_seed = Vec::with_capacity(a.seeds);
    let exp: Option<Experiment> = if a.seeds > 1 {
        let path = a.checkpoint.join(EXPERIMENT);
        run.input(&path);
        Some(read_config(&path)?)
    } else {
        None
    };
    let base_seed = exp.as_ref().map_or(0, |e| e.train.seed);
    per_seed.push(seed_metrics(base_seed, &first, a.threshold)?);
    if let Some(exp) = &exp {
        for k in 1..a.seeds as u64 {
            let mut e = exp.clone();
            e.train.seed = base_seed + k;
            let (m, _) = train_model(model.kind, &cache, &e)?;
            let r = RunScores {
                scores: m.scores(&cache.test, SCORE_BATCH)?,
                labels: y.clone(),
            };
            per_seed.push(seed_metrics(e.train.seed, &r, a.threshold)?);
        }
    }
    let n_positive = y.iter().filter(|&&v| v == 1).count();
    let report = aggregate(per_seed, y.len(), n_positive, a.threshold);

    create_dir(&a.out)?;
    let metrics = a.out.join("metrics.json");
    report.write_json(&metrics)?;
    let roc = a.out.join("roc.csv");
    write_roc_csv(&roc, &roc_curve(&first.scores, &first.labels)?)?;
    run.output(&metrics);
    run.output(&roc);
    run.finish(&manifest_for_dir(&a.out))
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut run = Run::start("simulate");
    run.input(&a.panels);
    let cfg = SimConfig {
        portfolio_sizes: a.sizes.clone(),
        n_repeats: a.repeats,
        seed: a.seed,
        threshold: a.threshold,
        paired: !a.unpaired,
        references: if a.gc_reference {
            vec![ReferenceLine::gc_reference()]
        } else {
            Vec::new()
        },
    };
    run.config(&cfg)?;
    run.seed(a.seed);
    let cache = PanelCache::load(&a.panels)?;

    let mut models = Vec::with_capacity(a.checkpoints.len());
    for dir in &a.checkpoints {
        run.input(dir);
        let model = load_matching(dir, &cache)?;
        let mut name = model.kind.display_name().to_string();
        if models.iter().any(|m: &ModelScores| m.model == name) {
            name = format!("{name} ({})", dir.display());
        }
        models.push(ModelScores {
            model: name,
            scores: model.scores(&cache.test, SCORE_BATCH)?,
        });
    }
    let result = run_simulation(&models, &labels(&cache.test), &cfg)?;
    export_sim_csv(&result, &a.out)?;
    run.output(&a.out);
    if let Some(raw) = &a.raw {
        result.write_json(raw)?;
        run.output(raw);
    }
    run.finish(&manifest_for_file(&a.out))
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut run = Run::start("bench");
    run.input(&a.panels);
    let exp = load_experiment(a.config.as_deref())?;
    let kinds: Vec<ModelKind> = if a.models == "all" {
        ModelKind::ALL.to_vec()
    } else {
        a.models.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?
    };
    run.config(&serde_json::json!({
        "models": kinds,
        "steps": a.steps,
        "batch_size": a.batch_size,
        "model": exp.model,
    }))?;
    let cache = PanelCache::load(&a.panels)?;
    let n = a.batch_size.min(cache.train.len());
    let batch = Batch::from_panels(&cache.train[..n])?;
    let mut cfg = exp.model.clone();
    cfg.vocab_size = cache.vocab.size();

    let mut times = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let model = Model::init(kind, cfg.clone(), 0)?;
        let s = benchmark_step_time(&model, &batch, a.steps)?;
        log::info!("{kind}: {s:.4} s/step");
        times.push((kind, s));
    }
    let rows = relative_time_table(&times);
    if let Some(fastest) = rows.iter().find(|r| r.relative_time == 1.0) {
        log::info!("fastest per step: {}", fastest.model);
    }
    write_bench_csv(&a.out, &rows)?;
    run.output(&a.out);
    run.finish(&manifest_for_file(&a.out))
}
