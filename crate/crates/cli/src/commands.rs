use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;

use tamlab::benchgen::{load_split, serialize_split, write_split, BenchmarkSplit, Cell, GenConfig, GenError, TaskKind};
use tamlab::meta::{
    adapt_test_task, aggregate, aggregate_trials, evaluate, metric_rows_to_csv, pca_project, train as run_training,
    AdaptMethod, MetaError, MetricRow, TamConfig, TrainMethod, TrainOptions,
};
use tamlab::model::{Checkpoint, Model, TaskCodeValue};

use crate::config::{BenchmarkRef, ExperimentConfig};
use crate::manifest::{Entry, Manifest};
use crate::{CliError, EvalArgs, GenArgs, TrainArgs, VizArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn gen_error(e: GenError) -> CliError {
    match e {
        GenError::Config(m) => usage(m),
        other => CliError::Runtime(other.into()),
    }
}

fn meta_error(e: MetaError) -> CliError {
    match e {
        MetaError::Config(v) => usage(v.join("\n  ")),
        other => CliError::Runtime(other.into()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(split: &BenchmarkSplit) {
    let s = &split.meta.stats;
    println!(
        "{:?} {:?}: {} train / {} val / {} test tasks",
        split.family(),
        split.mode(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    println!(
        "candidates {}  accepted {}  duplicates removed {}  rejected {}",
        s.candidates, s.accepted, s.duplicates, s.rejected
    );
    for (reason, n) in &s.rejected_by_reason {
        println!("  rejected ({reason}): {n}");
    }
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let cfg: GenConfig = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            if cfg.family != a.family.into() || cfg.mode != a.mode.into() {
                return Err(usage("--family/--mode disagree with the config file"));
            }
            cfg
        }
        None => GenConfig::new(a.family.into(), a.mode.into()),
    };
    cfg.seed = a.seed;
    let counts = [
        (a.train_tasks, &mut cfg.train_tasks),
        (a.val_tasks, &mut cfg.val_tasks),
        (a.test_tasks, &mut cfg.test_tasks),
        (a.examples_per_task, &mut cfg.examples_per_task),
        (a.support_size, &mut cfg.support_size),
    ];
    let mut changed = a.config.is_none();
    for (flag, field) in counts {
        if let Some(v) = flag {
            *field = v;
            changed = true;
        }
    }
    if changed {
        cfg.reset_derived();
    }
    if a.jobs == 0 {
        return Err(usage("--jobs must be positive"));
    }
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(usage(v.join("\n  ")));
    }
    let split = tamlab::benchgen::build_split(&cfg, a.jobs).map_err(gen_error)?;
    let mut bytes = Vec::new();
    write_split(&split, &mut bytes)?;
    write_file(&a.out, &bytes)?;
    let mut m = Manifest::new(Some(serde_json::to_value(&cfg)?));
    m.outputs.push(Entry::of(&a.out, &bytes));
    m.write_beside(&a.out)?;
    print_summary(&split);
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let mut v = cfg.static_violations();
    if a.jobs == 0 {
        v.push("--jobs must be positive".into());
    }
    if !v.is_empty() {
        return Err(usage(v.join("\n  ")));
    }
    let split = cfg.load_benchmark()?;
    let v = cfg.split_violations(&split);
    if !v.is_empty() {
        return Err(usage(v.join("\n  ")));
    }
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let mut inputs = Vec::new();
    match &cfg.benchmark {
        BenchmarkRef::Path(p) => inputs.push(Entry::read(p)?),
        BenchmarkRef::Generate(_) => {
            let path = cfg.output_dir.join("benchmark.jsonl");
            serialize_split(&split, &path)?;
            inputs.push(Entry::read(&path)?);
        }
    }
    let config_json = serde_json::to_value(&cfg)?;
    for &seed in &cfg.seeds {
        let dir = cfg.output_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.init_seed = seed;
        let model = Model::new(model_cfg).map_err(|e| CliError::Runtime(e.into()))?;
        let training = TamConfig {
            seed,
            ..cfg.training()
        };
        let out = run_training(&split, &model, cfg.method, &training, a.jobs, TrainOptions::default()).map_err(meta_error)?;

        let mut ck = Checkpoint::new(&model, out.params.clone(), Some(out.optimizer.clone()));
        ck.extras.insert("method".into(), serde_json::to_value(cfg.method)?);
        ck.extras.insert("seed".into(), seed.into());
        ck.extras.insert("training".into(), serde_json::to_value(&training)?);
        if let Some(m) = cfg.eval_method {
            ck.extras.insert("eval_method".into(), serde_json::to_value(m)?);
        }
        if !out.task_embeddings.is_empty() {
            ck.extras.insert("task_embeddings".into(), serde_json::to_value(&out.task_embeddings)?);
        }
        if let Some(it) = out.best_iteration {
            ck.extras.insert("best_iteration".into(), it.into());
        }
        let ck_path = dir.join("checkpoint.json");
        let ck_text = ck.to_json();
        write_file(&ck_path, ck_text.as_bytes())?;

        let log_path = dir.join("train_log.jsonl");
        let mut log = Vec::new();
        for e in &out.log {
            writeln!(log, "{}", serde_json::to_string(e)?)?;
        }
        write_file(&log_path, &log)?;

        let mut m = Manifest::new(Some(config_json.clone()));
        m.inputs = inputs.iter().map(|e| Entry { path: e.path.clone(), blob: e.blob.clone() }).collect();
        m.outputs.push(Entry::of(&ck_path, ck_text.as_bytes()));
        m.outputs.push(Entry::of(&log_path, &log));
        m.write_beside(&ck_path)?;
        println!("seed {seed}: {} iterations -> {}", out.log.iter().filter(|e| matches!(e, tamlab::meta::LogEvent::Outer { .. })).count(), ck_path.display());
    }
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    model: Model,
    method: Option<TrainMethod>,
    training: TamConfig,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (ck, model) = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let method = match ck.extras.get("method") {
        Some(v) => Some(serde_json::from_value(v.clone())?),
        None => None,
    };
    let training = match ck.extras.get("training") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => TamConfig::default(),
    };
    Ok(Loaded {
        ck,
        model,
        method,
        training,
    })
}

/// Field-level mismatches between a checkpoint's model and a split.
fn mismatches(l: &Loaded, split: &BenchmarkSplit) -> Vec<String> {
    let method = l.method.unwrap_or(TrainMethod::Multitask);
    tamlab::meta::compatibility_violations(split, &l.ck.model, method)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(usage("--jobs must be positive"));
    }
    let split = load_split(&a.split).with_context(|| format!("loading {}", a.split.display()))?;
    let mut m = Manifest::new(None);
    m.inputs.push(Entry::read(&a.split)?);
    let mut rows: Vec<MetricRow> = Vec::new();
    for path in &a.checkpoint {
        let l = load_checkpoint(path)?;
        m.inputs.push(Entry::read(path)?);
        let bad = mismatches(&l, &split);
        if !bad.is_empty() {
            return Err(usage(format!("checkpoint {} does not fit the split:\n  {}", path.display(), bad.join("\n  "))));
        }
        let stored: Option<AdaptMethod> = match l.ck.extras.get("eval_method") {
            Some(v) => Some(serde_json::from_value(v.clone())?),
            None => None,
        };
        let method: AdaptMethod = match (a.method, stored) {
            (Some(m), _) => m.into(),
            (None, Some(m)) => m,
            (None, None) => l
                .method
                .map_or(AdaptMethod::None, |t| t.validation_adaptation(l.model.config().is_compositional())),
        };
        let seed = l.ck.extras.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let ks: Vec<usize> = if method == AdaptMethod::None { vec![0] } else { a.k.clone() };
        let tasks = split.tasks(a.set.into());
        let name = format!("{}/{}", l.method.map_or("unknown", TrainMethod::name), method.name());
        for k in ks {
            let metrics = evaluate(
                &l.model,
                &l.ck.params,
                tasks,
                split.family(),
                method,
                k,
                split.meta.config.support_size,
                a.max_eval,
                &l.training,
                split.meta.compositional.as_ref(),
                a.jobs,
            )
            .map_err(meta_error)?;
            rows.push(aggregate(&name, split.family(), split.mode(), k, seed, &metrics));
        }
    }
    if a.checkpoint.len() > 1 {
        let all = aggregate_trials(&rows);
        rows.extend(all);
    }
    let csv = metric_rows_to_csv(&rows);
    match &a.out {
        Some(p) => {
            write_file(p, csv.as_bytes())?;
            m.outputs.push(Entry::of(p, csv.as_bytes()));
            m.write_beside(p)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_cell(s: &str) -> Result<Cell> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [r, c] => match (r.parse(), c.parse()) {
            (Ok(r), Ok(c)) => Ok(Cell(r, c)),
            _ => Err(usage(format!("--start expects row,col, got {s:?}"))),
        },
        _ => Err(usage(format!("--start expects row,col, got {s:?}"))),
    }
}

pub fn viz(a: &VizArgs) -> Result<()> {
    let start = parse_cell(&a.start)?;
    let split = load_split(&a.split).with_context(|| format!("loading {}", a.split.display()))?;
    if split.family() != tamlab::benchgen::Family::Pathfinding {
        return Err(usage("viz-embeddings needs a path-finding split"));
    }
    let l = load_checkpoint(&a.checkpoint)?;
    let bad = mismatches(&l, &split);
    if !bad.is_empty() {
        return Err(usage(format!("checkpoint does not fit the split:\n  {}", bad.join("\n  "))));
    }
    let set = a.set.into();
    let table: Option<Vec<Vec<f64>>> = match l.ck.extras.get("task_embeddings") {
        Some(v) if set == tamlab::benchgen::TaskSet::Train => Some(serde_json::from_value(v.clone())?),
        _ => None,
    };
    let mut rows = Vec::new();
    let mut embeddings = Vec::new();
    for (i, task) in split.tasks(set).iter().enumerate() {
        let TaskKind::Pathfinding { start: s, end, .. } = task.spec.kind else {
            continue;
        };
        if s != start {
            continue;
        }
        let z = match &table {
            Some(t) => t[i].clone(),
            None => {
                let method = if l.model.config().is_compositional() {
                    AdaptMethod::CompSlot
                } else {
                    AdaptMethod::TamZ
                };
                let state = adapt_test_task(&l.model, &l.ck.params, task, a.k, method, &l.training, split.meta.compositional.as_ref())
                    .map_err(meta_error)?;
                flatten_code(&state.code)
            }
        };
        rows.push((i, end));
        embeddings.push(z);
    }
    if rows.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("no {:?} task starts at ({}, {})", set, start.0, start.1)));
    }
    let pca = pca_project(&embeddings, 2).map_err(meta_error)?;
    let mut csv = String::from("task,end_row,end_col,pc1,pc2\n");
    for ((task, end), c) in rows.iter().zip(&pca.coordinates) {
        csv.push_str(&format!("{task},{},{},{},{}\n", end.0, end.1, c[0], c[1]));
    }
    eprintln!(
        "{} tasks; explained variance {:.4}, {:.4}",
        rows.len(),
        pca.explained_variance[0],
        pca.explained_variance[1]
    );
    match &a.out {
        Some(p) => {
            write_file(p, csv.as_bytes())?;
            let mut m = Manifest::new(None);
            m.inputs.push(Entry::read(&a.split)?);
            m.inputs.push(Entry::read(&a.checkpoint)?);
            m.outputs.push(Entry::of(p, csv.as_bytes()));
            m.write_beside(p)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn flatten_code(code: &TaskCodeValue) -> Vec<f64> {
    match code {
        TaskCodeValue::Zero => Vec::new(),
        TaskCodeValue::Dense(z) => z.clone(),
        TaskCodeValue::Composite(slots) => slots
            .iter()
            .filter_map(|s| match s {
                tamlab::model::SlotValue::Free(z) => Some(z.clone()),
                _ => None,
            })
            .flatten()
            .collect(),
    }
}
