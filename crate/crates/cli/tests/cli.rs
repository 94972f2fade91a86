use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use geofew::checkpoint;
use geofew::datasets::{load_csv, split_base_novel, CsvSchema, Split};
use geofew::evaluation::accuracy_on_split;

const SMALL: &str = r#"{
    "seed": 3,
    "data": {"n_categories": 8, "dim": 8, "train_per_category": 60, "val_per_category": 20,
             "test_per_category": 20, "max_cosine": 0.3, "noise_sigma": 0.15, "seed": 5},
    "split": {"base_ids": [0, 1, 2, 3], "novel_ids": [4, 5, 6, 7]},
    "network": {"blocks": [[16], [16], [16, 8]], "dropout_rate": 0.0, "n_top": 1},
    "stage1": {"epochs": 2, "batch_size": 50},
    "stage2": {"iterations": 15},
    "episode": {"n_way": 3, "k_shot": 2, "t_novel": 5, "t_base": 5},
    "episodes": 3
}"#;

fn geofew(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofew"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Temp dir holding `c.json`, `d.csv` and a stage-1 checkpoint `m.ckpt`.
fn trained() -> (TempDir, Value) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    ok_json(&geofew(&["gen-data", "--config", "c.json", "--out", "d.csv"], dir.path()));
    let summary = ok_json(&geofew(
        &["train-base", "--config", "c.json", "--data", "d.csv", "--out-checkpoint", "m.ckpt"],
        dir.path(),
    ));
    (dir, summary)
}

fn evaluate(dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["evaluate", "--checkpoint", "m.ckpt", "--config", "c.json", "--data", "d.csv"];
    args.extend_from_slice(extra);
    ok_json(&geofew(&args, dir))
}

fn results(report: &Value) -> Vec<Value> {
    report["episodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["result"].clone())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let a = ok_json(&geofew(&["gen-data", "--config", "c.json", "--out", "a.csv"], dir.path()));
    ok_json(&geofew(&["gen-data", "--config", "c.json", "--out", "b.csv"], dir.path()));
    assert_eq!(
        std::fs::read(dir.path().join("a.csv")).unwrap(),
        std::fs::read(dir.path().join("b.csv")).unwrap()
    );
    assert_eq!(a["categories"], 8);
    assert_eq!(a["examples"]["train"], 480);
    assert!(a["class_mean_max_cosine"].as_f64().unwrap() <= 0.3 + 1e-9);
    assert!(a["sample_mean_max_cosine"].is_number());
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"seed\": ,\n}").unwrap();
    let out = geofew(&["gen-data", "--config", "bad.json", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    std::fs::write(dir.path().join("unknown.json"), r#"{"sede": 1}"#).unwrap();
    let out = geofew(&["gen-data", "--config", "unknown.json", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = geofew(&["evaluate", "--config", "unknown.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_blobs_fail_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"data": {"n_categories": 12, "dim": 2, "max_cosine": 0.0}}"#,
    )
    .unwrap();
    let out = geofew(&["gen-data", "--config", "c.json", "--out", "x.csv"], dir.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("larger dim"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn train_base_outputs_agree_with_the_checkpoint() {
    let (dir, summary) = trained();
    let bytes = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    let (net, header) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&net, &header.config_hash, header.seed).unwrap(), bytes);

    // 240 training rows in batches of 50, two epochs
    let history = std::fs::read_to_string(dir.path().join("m.ckpt.history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 10);
    assert_eq!(summary["steps"], 10);
    for line in history.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert!(rec["L_total"].is_number() && rec["s"].as_f64().unwrap() >= 1.0);
    }

    let ds = load_csv(&dir.path().join("d.csv"), &CsvSchema::default()).unwrap();
    let (base, _) = split_base_novel(&ds, &[0, 1, 2, 3], &[4, 5, 6, 7]).unwrap();
    let recomputed = accuracy_on_split(&net, &base, Split::Val).unwrap();
    assert_eq!(summary["final_val_accuracy"].as_f64().unwrap(), recomputed);
}

#[test]
fn evaluate_report_contract() {
    let (dir, _) = trained();
    let report = evaluate(dir.path(), &["--jobs", "2", "--csv", "r.csv"]);
    assert_eq!(report["config"]["seed"], 3);
    assert_eq!(report["mode"], "finetune");
    assert_eq!(report["aggregate"]["n_episodes"], 3);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for e in report["episodes"].as_array().unwrap() {
        assert_eq!(e["history"]["steps"].as_array().unwrap().len(), 15);
    }
    // fan-out width does not change results
    let serial = evaluate(dir.path(), &["--jobs", "1"]);
    assert_eq!(results(&serial), results(&report));
}

#[test]
fn single_episode_and_ablation() {
    let (dir, _) = trained();
    let one = evaluate(dir.path(), &["--episodes", "1"]);
    assert_eq!(one["aggregate"]["single_episode"], true);
    assert_eq!(one["aggregate"]["acc_novel"]["ci95"], 0.0);

    let abl = evaluate(dir.path(), &["--mode", "ablation"]);
    for e in abl["episodes"].as_array().unwrap() {
        assert!(e["history"]["steps"].as_array().unwrap().is_empty());
        assert_eq!(e["result"]["finetune_steps"], 0);
    }
}

#[test]
fn uniform_prior_changes_nothing() {
    let (dir, _) = trained();
    let plain = evaluate(dir.path(), &[]);
    let uniform = evaluate(dir.path(), &["--prior", "0.5"]);
    for (p, u) in results(&plain).iter().zip(results(&uniform)) {
        assert_eq!(u["acc_both_prior"], u["acc_both"]);
        assert_eq!(u["novel_fraction_prior"], u["novel_fraction"]);
        assert_eq!(u["acc_both"], p["acc_both"]);
    }
    let out = geofew(
        &["evaluate", "--checkpoint", "m.ckpt", "--config", "c.json", "--prior", "1.5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_stage_schedule_matches_evaluate() {
    let (dir, _) = trained();
    let inc = ok_json(&geofew(
        &["incremental", "--checkpoint", "m.ckpt", "--config", "c.json", "--data", "d.csv", "--schedule", "2"],
        dir.path(),
    ));
    let eval = evaluate(dir.path(), &[]);
    let stages = inc["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0]["episodes"].as_array().unwrap(), &results(&eval));
}

#[test]
fn incremental_reports_every_stage() {
    let (dir, _) = trained();
    let inc = ok_json(&geofew(
        &["incremental", "--checkpoint", "m.ckpt", "--config", "c.json", "--schedule", "1,2,4"],
        dir.path(),
    ));
    let shots: Vec<u64> = inc["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["shots"].as_u64().unwrap())
        .collect();
    assert_eq!(shots, vec![1, 2, 4]);
}

#[test]
fn malformed_schedules_exit_with_usage_code() {
    let (dir, _) = trained();
    for bad in ["1,x", "3,2", "0,1", ""] {
        let out = geofew(
            &["incremental", "--checkpoint", "m.ckpt", "--config", "c.json", "--schedule", bad],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn diagnose_dump_and_summaries() {
    let (dir, _) = trained();
    let args = [
        "diagnose",
        "--checkpoint",
        "m.ckpt",
        "--data",
        "d.csv",
        "--config",
        "c.json",
        "--embeddings",
        "e.csv",
    ];
    let first = geofew(&args, dir.path());
    let summary = ok_json(&first);
    let dump = std::fs::read(dir.path().join("e.csv")).unwrap();
    let rows = String::from_utf8(dump.clone()).unwrap().lines().count() - 1;
    assert_eq!(rows, 8 * 100);
    assert_eq!(summary["embedding_rows"], 800);
    for key in ["within_base", "base_medians", "novel_medians"] {
        let f = &summary["diagnostics"][key];
        let v: Vec<f64> = ["min", "q1", "median", "q3", "max"]
            .iter()
            .map(|k| f[k].as_f64().unwrap())
            .collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]), "{key}: {v:?}");
    }
    let second = geofew(&args, dir.path());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(std::fs::read(dir.path().join("e.csv")).unwrap(), dump);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let (dir, _) = trained();
    let other: PathBuf = dir.path().join("other.json");
    std::fs::write(&other, r#"{"data": {"dim": 12}}"#).unwrap();
    let out = geofew(
        &["evaluate", "--checkpoint", "m.ckpt", "--config", "other.json", "--episodes", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint expects"));
}
