use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use trackrank::data::load_dataset;

fn trackrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trackrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = trackrank(args);
    assert!(
        out.status.success(),
        "trackrank {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut a = args.to_vec();
    a.push("--json");
    serde_json::from_str(&ok(&a)).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &TempDir, body: &str) -> PathBuf {
    let path = dir.path().join("small.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{"data": {"synthetic": {"num_identities": 12, "frames_per_tracklet": 8}}, "sampler": {"p": 4, "k": 4}, "train": {"steps": 30}}"#;

#[test]
fn synth_writes_loadable_splits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--seed", "7", "--out", s(&b)]);
    for split in ["train", "test"] {
        let ds = load_dataset(&a.join(split)).unwrap();
        assert_eq!(ds.num_identities(), 32);
        let mut names: Vec<_> = fs::read_dir(a.join(split)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(fs::read(a.join(split).join(&n)).unwrap(), fs::read(b.join(split).join(&n)).unwrap());
        }
    }
    assert!(!load_dataset(&a.join("test")).unwrap().queries.is_empty());

    let again = trackrank(&["synth", "--out", s(&a)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["synth", "--out", s(&a), "--force"]);
}

#[test]
fn synth_rejects_bad_sigma_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, r#"{"data": {"synthetic": {"sigma_between": 0.0}}}"#);
    let out_dir = dir.path().join("never");
    let out = trackrank(&["synth", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma_between"));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, r#"{"trian": {}}"#);
    let out = trackrank(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn train_and_eval_on_written_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--out", s(&data)]);
    let metrics = json(&["train", "--data", s(&data), "--out", s(&run)]);
    assert_eq!(metrics["head"], "avg-pool");
    assert!(metrics["final"]["map"].as_f64().unwrap() >= 0.95);
    assert_eq!(metrics["final"]["step"], 500);
    for f in ["checkpoint.json", "checkpoint.bin", "checkpoint_init.json", "loss_log.jsonl", "metrics.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("loss_log.jsonl")).unwrap().lines().count(), 500);

    let trained = json(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&data)]);
    let report = &trained["report"];
    for k in ["1", "5", "10", "20"] {
        assert!(report["cmc"][k].is_f64(), "rank {k}");
    }
    let trained_map = report["map"].as_f64().unwrap();
    assert_eq!(trained_map, metrics["final"]["map"].as_f64().unwrap());

    let untrained = json(&["eval", "--checkpoint", s(&run.join("checkpoint_init.json")), "--data", s(&data.join("test"))]);
    assert!(untrained["report"]["map"].as_f64().unwrap() < trained_map);

    let untrained_map = untrained["report"]["map"].as_f64().unwrap();
    let reranked = json(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint_init")),
        "--data",
        s(&data),
        "--rerank",
        "--lambda",
        "1",
    ]);
    assert_eq!(reranked["report"]["map"].as_f64().unwrap(), untrained_map);
    assert_eq!(reranked["rerank"]["lambda"], 1.0);
}

#[test]
fn missing_dataset_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = trackrank(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!out_dir.exists());
}

#[test]
fn head_flags_are_echoed_in_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, SMALL);
    let run = dir.path().join("rnn");
    ok(&["train", "--config", s(&cfg), "--head", "rnn", "--readout", "output_average", "--out", s(&run)]);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let head = &metrics["config"]["head"];
    assert_eq!(head["kind"], "rnn");
    assert_eq!(head["readout"], "output_average");
    assert_eq!(metrics["train_config"]["model"]["head"], *head);

    let bad = trackrank(&["train", "--config", s(&cfg), "--head", "avg-pool", "--readout", "final_state", "--out", s(&dir.path().join("x"))]);
    assert!(!bad.status.success());
}

#[test]
fn eval_parallelism_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, SMALL);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let ckpt = run.join("checkpoint");
    let eval = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_trackrank"))
            .args(["eval", "--checkpoint", s(&ckpt), "--json"])
            .env("TRACKRANK_THREADS", threads)
            .output()
            .unwrap();
        (out.status.success(), String::from_utf8(out.stdout).unwrap())
    };
    let (ok1, one) = eval("1");
    let (ok4, four) = eval("4");
    assert!(ok1 && ok4);
    let strip = |t: &str| {
        let mut v: Value = serde_json::from_str(t).unwrap();
        v["report"]["runtime_secs"] = Value::Null;
        v
    };
    assert_eq!(strip(&one), strip(&four));
    assert!(!eval("many").0);
}

#[test]
fn gradcheck_table_and_exit_codes() {
    let all = json(&["gradcheck", "--seeds", "3"]);
    assert_eq!(all["passed"], true);
    assert_eq!(all["rows"].as_array().unwrap().len(), 12);

    let strict = trackrank(&["gradcheck", "--tolerance", "1e-12", "--seeds", "2"]);
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));

    let one = json(&["gradcheck", "--head", "gru-final", "--seeds", "2"]);
    let rows = one["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["name"], "gru-final");

    assert!(!trackrank(&["gradcheck", "--head", "bogus"]).status.success());
}

#[test]
fn compare_is_deterministic_with_baseline_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, SMALL);
    let args = ["compare", "--config", s(&cfg), "--seed", "3"];
    let table = ok(&args);
    assert_eq!(table, ok(&args));
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("method"));
    assert!(lines[1].starts_with("image-baseline"));
    assert_eq!(lines.len(), 1 + 11 + 1);

    let report = json(&args);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows[0]["t"], 1);
    assert!(rows[1..].iter().all(|r| r["t"] == 4));
    assert_eq!(rows[5]["method"], "att-tconv-softmax");
}
