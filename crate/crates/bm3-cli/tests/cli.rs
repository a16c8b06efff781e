//! End-to-end tests of the `bm3` binary: prepare -> train -> evaluate
//! on a synthetic fixture, plus the error-path exit codes and the
//! ablation/grid report files.

use bm3_core::fmat::write_fmat;
use bm3_core::synthetic;
use bm3_core::{read_index_map, write_interactions, Modality};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bm3(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bm3"))
        .args(args)
        .current_dir(dir)
        .env_remove("BM3_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a raw interaction table and feature tables aligned to the
/// item index that `prepare` will emit, then runs `prepare`.
struct Fixture {
    root: tempfile::TempDir,
    prep: PathBuf,
    visual: PathBuf,
    textual: PathBuf,
}

fn fixture() -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let raw = root.path().join("raw.tsv");
    let records = synthetic::planted_block(12, 8, 2, 4, 3).unwrap();
    write_interactions(&raw, &records).unwrap();

    let prep = root.path().join("prep");
    let out = bm3(
        &["prepare", "--input", raw.to_str().unwrap(), "--k", "1", "--seed", "7", "--out", prep.to_str().unwrap()],
        root.path(),
    );
    assert!(out.status.success(), "prepare failed: {}", stderr_of(&out));

    // Feature rows must follow the prepared item index, whose order is
    // first appearance, not key order.
    let item_keys = read_index_map(&prep.join("item_index.tsv")).unwrap();
    let order: Vec<usize> = item_keys
        .iter()
        .map(|k| k.trim_start_matches('i').parse::<usize>().unwrap())
        .collect();
    let visual = root.path().join("visual.fmat");
    let textual = root.path().join("textual.fmat");
    let v = synthetic::random_features(8, 5, Modality::Visual, 1);
    let t = synthetic::random_features(8, 3, Modality::Textual, 2);
    write_fmat(&visual, &v.values.gather_rows(&order)).unwrap();
    write_fmat(&textual, &t.values.gather_rows(&order)).unwrap();
    Fixture { root, prep, visual, textual }
}

impl Fixture {
    fn dir(&self) -> &Path {
        self.root.path()
    }

    fn config(&self, out_dir: &Path, extras: Value) -> PathBuf {
        let mut cfg = json!({
            "interactions": self.prep.join("interactions.tsv"),
            "user_index": self.prep.join("user_index.tsv"),
            "item_index": self.prep.join("item_index.tsv"),
            "visual_features": self.visual,
            "textual_features": self.textual,
            "out_dir": out_dir,
            "split_seed": 7,
            "d": 8,
            "layers": 1,
            "dropout": 0.3,
            "lambda": 0.01,
            "batch_size": 16,
            "max_epochs": 2,
            "patience": 2,
            "seed": 5,
            "cutoffs": [4],
            "stop_cutoff": 4
        });
        for (k, v) in extras.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.dir().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }
}

#[test]
fn prepare_writes_artifacts_and_k1_keeps_everything() {
    let f = fixture();
    for name in [
        "interactions.tsv",
        "user_index.tsv",
        "item_index.tsv",
        "train.tsv",
        "valid.tsv",
        "test.tsv",
        "stats.json",
    ] {
        assert!(f.prep.join(name).exists(), "missing {}", name);
    }
    let stats: Value =
        serde_json::from_str(&std::fs::read_to_string(f.prep.join("stats.json")).unwrap())
            .unwrap();
    assert_eq!(stats["users"], 12);
    assert_eq!(stats["items"], 8);
    assert_eq!(stats["interactions"], 48, "1-core keeps every interaction");
    let sparsity = stats["sparsity"].as_f64().unwrap();
    assert!((sparsity - 0.5).abs() < 1e-12, "48 of 96 cells filled");
    assert_eq!(
        stats["train_edges"].as_u64().unwrap()
            + stats["valid_edges"].as_u64().unwrap()
            + stats["test_edges"].as_u64().unwrap(),
        48
    );
    let lines = std::fs::read_to_string(f.prep.join("interactions.tsv")).unwrap();
    assert_eq!(lines.lines().count(), 48);
}

#[test]
fn train_then_evaluate_is_reproducible_to_the_byte() {
    let f = fixture();
    let run_dir = f.dir().join("run");
    let cfg = f.config(&run_dir, json!({}));
    let out = bm3(&["train", "--config", cfg.to_str().unwrap()], f.dir());
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("test"), "summary table expected, got: {}", stdout);
    for name in ["report.json", "metrics.ndjson", "config.json", "checkpoint/manifest.json"] {
        assert!(run_dir.join(name).exists(), "missing {}", name);
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    let epochs = report["epochs_run"].as_u64().unwrap();
    let log = std::fs::read_to_string(run_dir.join("metrics.ndjson")).unwrap();
    assert_eq!(log.lines().count() as u64, epochs + 1, "one line per epoch plus the test line");

    let checkpoint = run_dir.join("checkpoint");
    let out = bm3(
        &["evaluate", "--checkpoint", checkpoint.to_str().unwrap(), "--phase", "test"],
        f.dir(),
    );
    assert!(out.status.success(), "evaluate failed: {}", stderr_of(&out));
    let eval_path = run_dir.join("eval_test.json");
    let first = std::fs::read(&eval_path).unwrap();
    let out = bm3(
        &["evaluate", "--checkpoint", checkpoint.to_str().unwrap(), "--phase", "test"],
        f.dir(),
    );
    assert!(out.status.success());
    let second = std::fs::read(&eval_path).unwrap();
    assert_eq!(first, second, "re-evaluation must be byte-identical");

    // The standalone evaluation agrees with the training-time report.
    let eval: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(eval["recall"], report["test_metrics"]["recall"]);
    assert_eq!(eval["ndcg"], report["test_metrics"]["ndcg"]);
}

#[test]
fn config_typos_exit_with_code_2_and_name_the_keys() {
    let f = fixture();
    let path = f.dir().join("typo.json");
    std::fs::write(
        &path,
        r#"{"interactions": "x", "user_index": "y", "item_index": "z", "out_dir": "o", "dropuot": 0.3}"#,
    )
    .unwrap();
    let out = bm3(&["train", "--config", path.to_str().unwrap()], f.dir());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("dropuot"));
}

#[test]
fn missing_input_exits_with_code_3_and_the_path() {
    let f = fixture();
    let out = bm3(
        &["prepare", "--input", "no-such-file.tsv", "--out", "prep2"],
        f.dir(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("no-such-file.tsv"));
}

#[test]
fn divergent_training_exits_with_code_4() {
    let f = fixture();
    let run_dir = f.dir().join("diverge");
    let cfg = f.config(&run_dir, json!({"lambda": 1e308}));
    let out = bm3(&["train", "--config", cfg.to_str().unwrap()], f.dir());
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("epoch 1"));
}

#[test]
fn bad_thread_cap_exits_with_code_2() {
    let f = fixture();
    let out = Command::new(env!("CARGO_BIN_EXE_bm3"))
        .args(["evaluate", "--checkpoint", "nowhere", "--phase", "test"])
        .current_dir(f.dir())
        .env("BM3_THREADS", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("BM3_THREADS"));
}

#[test]
fn ablate_writes_the_seven_labeled_rows() {
    let f = fixture();
    let out_dir = f.dir().join("ablation");
    let cfg = f.config(&out_dir, json!({"max_epochs": 1, "patience": 1}));
    let out = bm3(&["ablate", "--config", cfg.to_str().unwrap()], f.dir());
    assert!(out.status.success(), "ablate failed: {}", stderr_of(&out));
    let tsv = std::fs::read_to_string(out_dir.join("ablation.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 8, "header plus seven variants");
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(
        labels,
        [
            "BM3 w/o v&t",
            "BM3 w/o v",
            "BM3 w/o t",
            "BM3 w/o mm",
            "BM3 w/o inter",
            "BM3 w/o intra",
            "BM3"
        ]
    );
    // Dropping both modality losses is the same model as dropping both
    // feature tables: identical metric columns.
    let metrics_of = |label: &str| {
        let row = lines[1..].iter().find(|l| l.starts_with(label)).unwrap();
        row.split('\t').skip(2).collect::<Vec<_>>()
    };
    assert_eq!(metrics_of("BM3 w/o v&t"), metrics_of("BM3 w/o mm"));
    for key in ["wo_vt", "wo_v", "wo_t", "wo_mm", "wo_inter", "wo_intra", "full"] {
        assert!(out_dir.join(key).join("checkpoint/manifest.json").exists(), "missing {}", key);
    }
    assert!(out_dir.join("ablation.json").exists());
}

#[test]
fn grid_marks_exactly_one_best_cell() {
    let f = fixture();
    let out_dir = f.dir().join("grid");
    let cfg = f.config(
        &out_dir,
        json!({
            "max_epochs": 1,
            "patience": 1,
            "grid_layers": [1],
            "grid_dropout": [0.0, 0.3],
            "grid_lambda": [0.01]
        }),
    );
    let out = bm3(&["grid", "--config", cfg.to_str().unwrap()], f.dir());
    assert!(out.status.success(), "grid failed: {}", stderr_of(&out));
    let tsv = std::fs::read_to_string(out_dir.join("grid.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two cells");
    assert!(lines[0].starts_with("layers\tdropout\tlambda"));
    let best_flags: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split('\t').nth_back(1).unwrap())
        .collect();
    assert_eq!(best_flags.iter().filter(|f| **f == "1").count(), 1);
    assert!(out_dir.join("L1_p0_lam0.01").exists());
    assert!(out_dir.join("L1_p0.3_lam0.01").exists());
}
