use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tamlab::benchgen::{load_split, TaskKind};

fn tamlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tamlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tamlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_gen(dir: &Path, name: &str, family: &str, mode: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "gen",
        "--family",
        family,
        "--mode",
        mode,
        "--seed",
        seed,
        "--train-tasks",
        "6",
        "--val-tasks",
        "1",
        "--test-tasks",
        "4",
        "--examples-per-task",
        "32",
        "--out",
        s(&out),
    ]);
    out
}

fn write_config(dir: &Path, name: &str, split: &Path, method: &str, model: serde_json::Value, seeds: &[u64]) -> PathBuf {
    let cfg = serde_json::json!({
        "benchmark": {"path": split},
        "method": method,
        "model": model,
        "training": {
            "max_inner_steps": 2,
            "examples_per_task": 16,
            "max_outer_iterations": 4,
            "validation_interval": 2,
            "validation_k": 4,
            "validation_examples": 8,
            "adaptation_steps_at_test": 2
        },
        "k_values": [1, 4],
        "seeds": seeds,
        "output_dir": dir.join(format!("{name}-out")),
    });
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn class_model() -> serde_json::Value {
    serde_json::json!({"num_layers": 1, "embed_dim": 8, "num_heads": 2, "feedforward_dim": 16, "max_positions": 16})
}

#[test]
fn gen_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_gen(dir.path(), "a.jsonl", "trans", "plain", "7");
    let b = small_gen(dir.path(), "b.jsonl", "trans", "plain", "7");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"][0]["blob"].as_str().unwrap().len(), 64);
}

#[test]
fn compositional_path_tests_have_one_unseen_primitive() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_gen(dir.path(), "p.jsonl", "path", "comp", "3");
    let split = load_split(&p).unwrap();
    let comp = split.meta.compositional.as_ref().unwrap();
    assert_eq!(split.test.len(), 4);
    for t in &split.test {
        assert_eq!(comp.unseen_slots(t.spec.primitive_ids.unwrap()).len(), 1);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let out = tamlab(&["gen", "--mode", "plain", "--out", "/tmp/never.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tamlab(&[
        "gen",
        "--family",
        "class",
        "--examples-per-task",
        "8",
        "--support-size",
        "20",
        "--out",
        "/tmp/never.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("support_size"));
}

#[test]
fn print_config_dumps_every_default() {
    let out = ok(&["train", "--print-config"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["training"]["max_inner_steps"], 25);
    assert_eq!(v["method"], "tam");
    assert!(v["model"]["embed_dim"].is_number());
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let split = small_gen(dir.path(), "c.jsonl", "class", "plain", "1");
    let cfg = write_config(dir.path(), "tam", &split, "tam", class_model(), &[0, 1]);
    ok(&["train", "--config", s(&cfg)]);
    let ck0 = dir.path().join("tam-out/seed-0/checkpoint.json");
    let ck1 = dir.path().join("tam-out/seed-1/checkpoint.json");
    let first = std::fs::read(&ck0).unwrap();
    assert!(dir.path().join("tam-out/seed-0/train_log.jsonl").exists());
    assert!(dir.path().join("tam-out/seed-0/checkpoint.json.manifest.json").exists());

    ok(&["train", "--config", s(&cfg)]);
    assert_eq!(std::fs::read(&ck0).unwrap(), first);

    let csv = dir.path().join("m.csv");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ck0),
        "--checkpoint",
        s(&ck1),
        "--split",
        s(&split),
        "--k",
        "1,4",
        "--out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,family,mode,k,mean,std,n_tasks,seed");
    assert_eq!(lines.len(), 1 + 4 + 2);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        let mean: f64 = f[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&mean));
        assert!(f[3] == "1" || f[3] == "4");
    }
    assert!(lines.iter().filter(|l| l.ends_with(",all")).count() == 2);
}

#[test]
fn mismatches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let split = small_gen(dir.path(), "c.jsonl", "class", "plain", "2");
    let cfg = write_config(dir.path(), "bad", &split, "comp-tam", class_model(), &[0]);
    let out = tamlab(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("compositional"));

    let cfg = write_config(dir.path(), "good", &split, "multitask", class_model(), &[0]);
    ok(&["train", "--config", s(&cfg)]);
    let trans = small_gen(dir.path(), "t.jsonl", "trans", "plain", "2");
    let out = tamlab(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("good-out/seed-0/checkpoint.json")),
        "--split",
        s(&trans),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture"));
}

#[test]
fn transduction_perplexity_is_at_least_one() {
    let dir = tempfile::tempdir().unwrap();
    let split = small_gen(dir.path(), "t.jsonl", "trans", "plain", "4");
    let model = serde_json::json!({
        "num_layers": 1, "embed_dim": 8, "num_heads": 2, "feedforward_dim": 16,
        "max_positions": 16, "architecture": "decoder"
    });
    let cfg = write_config(dir.path(), "t", &split, "task-agnostic", model, &[5]);
    ok(&["train", "--config", s(&cfg)]);
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("t-out/seed-5/checkpoint.json")),
        "--split",
        s(&split),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "task-agnostic/none");
    assert_eq!(row[3], "0");
    assert!(row[4].parse::<f64>().unwrap() >= 1.0);
    assert_eq!(row[7], "5");
}

#[test]
fn viz_filters_by_start_cell() {
    let dir = tempfile::tempdir().unwrap();
    let split_path = dir.path().join("p.jsonl");
    ok(&[
        "gen",
        "--family",
        "path",
        "--seed",
        "9",
        "--train-tasks",
        "4",
        "--val-tasks",
        "0",
        "--test-tasks",
        "150",
        "--examples-per-task",
        "24",
        "--out",
        s(&split_path),
    ]);
    let split = load_split(&split_path).unwrap();
    let starts: Vec<_> = split
        .test
        .iter()
        .map(|t| match t.spec.kind {
            TaskKind::Pathfinding { start, .. } => start,
            _ => unreachable!(),
        })
        .collect();
    let common = starts
        .iter()
        .copied()
        .max_by_key(|c| (starts.iter().filter(|d| *d == c).count(), std::cmp::Reverse((c.0, c.1))))
        .unwrap();
    let expected = starts.iter().filter(|c| **c == common).count();
    let model = serde_json::json!({
        "num_layers": 1, "embed_dim": 8, "num_heads": 2, "feedforward_dim": 16,
        "max_positions": 40, "architecture": "decoder", "vocab_size": 200
    });
    let cfg = write_config(dir.path(), "p", &split_path, "tam", model, &[0]);
    ok(&["train", "--config", s(&cfg)]);
    let ck = dir.path().join("p-out/seed-0/checkpoint.json");
    let start = format!("{},{}", common.0, common.1);
    let out = tamlab(&["viz-embeddings", "--checkpoint", s(&ck), "--split", s(&split_path), "--start", &start, "--k", "4"]);
    assert!(expected >= 3, "only {expected} tasks share a start");
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "task,end_row,end_col,pc1,pc2");
        assert_eq!(lines.len() - 1, expected);
    }
    let unused = (0..10)
        .flat_map(|r| (0..10).map(move |c| (r, c)))
        .find(|&(r, c)| !starts.iter().any(|s| s.0 == r && s.1 == c))
        .unwrap();
    let out = tamlab(&[
        "viz-embeddings",
        "--checkpoint",
        s(&ck),
        "--split",
        s(&split_path),
        "--start",
        &format!("{},{}", unused.0, unused.1),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selfcheck_passes() {
    let out = ok(&["selfcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("ok")).count(), 4, "{text}");
}
