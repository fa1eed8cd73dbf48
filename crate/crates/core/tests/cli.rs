use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn condmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condmatch"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus with a 12/6 split under `dir/data`.
fn gen(dir: &Path) {
    let out = dir.join("data");
    let o = condmatch(&[
        "gen-data",
        "--out",
        s(&out),
        "--pairs",
        "18",
        "--test-pairs",
        "6",
        "--seed",
        "3",
        "--clips-min",
        "1",
        "--clips-max",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let data = dir.join("data/train.json");
    let run = dir.join(out);
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--batch-pairs",
        "6",
        "--d-e",
        "6",
    ];
    args.extend_from_slice(extra);
    condmatch(&args)
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&condmatch(&["--help"])), 0);
    assert_eq!(code(&condmatch(&["train", "--help"])), 0);
    assert_eq!(code(&condmatch(&[])), 1);
    assert_eq!(code(&condmatch(&["eval", "--bogus"])), 1);
}

#[test]
fn invalid_distractor_fraction_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = condmatch(&["gen-data", "--out", s(dir.path()), "--distractor-fraction", "1.5"]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn gen_data_writes_manifest_and_split() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let count = |name: &str| {
        let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("data").join(name)).unwrap()).unwrap();
        v["pairs"].as_array().unwrap().len()
    };
    assert_eq!(
        (count("manifest.json"), count("train.json"), count("test.json")),
        (18, 12, 6)
    );
}

#[test]
fn config_file_is_merged_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[synthetic]\nn_pairs = 5\nseed = 9\n").unwrap();
    let out = dir.path().join("d");
    let o = condmatch(&["--config", s(&cfg), "gen-data", "--out", s(&out), "--pairs", "4"]);
    assert_eq!(code(&o), 0);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("n_pairs = 4"), "{stderr}");
    assert!(stderr.contains("seed = 9"), "{stderr}");

    fs::write(&cfg, "[synthetic]\nnot_a_field = 1\n").unwrap();
    assert_eq!(
        code(&condmatch(&["--config", s(&cfg), "gen-data", "--out", s(&out)])),
        1
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    assert_eq!(code(&train(dir.path(), "full", &["--epochs", "3"])), 0);
    assert_eq!(code(&train(dir.path(), "part", &["--epochs", "2"])), 0);
    let ck = dir.path().join("part/checkpoint.ckpt");
    assert_eq!(
        code(&train(dir.path(), "part", &["--epochs", "3", "--resume", s(&ck)])),
        0
    );
    let full = fs::read(dir.path().join("full/checkpoint.ckpt")).unwrap();
    assert_eq!(full, fs::read(&ck).unwrap());
    assert_eq!(full, fs::read(dir.path().join("full/epoch-0003.ckpt")).unwrap());

    let log = fs::read_to_string(dir.path().join("part/loss.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2, 3]);
}

#[test]
fn eval_retrieve_and_explain_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p);
    assert_eq!(code(&train(p, "run", &["--epochs", "1"])), 0);
    let test = p.join("data/test.json");
    let ck = p.join("run/checkpoint.ckpt");

    let o = condmatch(&["eval", "--data", s(&test), "--checkpoint", s(&ck), "--exhaustive"]);
    assert_eq!(code(&o), 0);
    let reports: Value = serde_json::from_slice(&o.stdout).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["direction"], "t2v");
    assert_eq!(reports[1]["direction"], "v2t");
    assert_eq!(reports[0]["ranks"].as_array().unwrap().len(), 6);

    let o = condmatch(&[
        "retrieve",
        "--data",
        s(&test),
        "--checkpoint",
        s(&ck),
        "--query",
        "pair-0013",
        "--direction",
        "v2t",
        "--k-shortlist",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[..3].iter().all(|l| l["score"].is_f64()));
    assert!(lines[3..].iter().all(|l| l["score"].is_null()));

    let heat = p.join("heat");
    let o = condmatch(&[
        "explain",
        "--data",
        s(&test),
        "--checkpoint",
        s(&ck),
        "--video",
        "pair-0013",
        "--heatmap",
        s(&heat),
    ]);
    assert_eq!(code(&o), 0);
    let ex: Value = serde_json::from_slice(&o.stdout).unwrap();
    let clips = ex["clips"].as_array().unwrap().len();
    let grid = fs::read_to_string(p.join("heat.frames.tsv")).unwrap();
    assert_eq!(grid.lines().count(), clips);
    for line in grid.lines() {
        let total: f64 = line.split('\t').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }
    assert!(p.join("heat.words.tsv").exists());

    let o = condmatch(&["explain", "--data", s(&test), "--checkpoint", s(&ck), "--video", "nope"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_or_corrupt_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p);
    let test = p.join("data/test.json");
    let missing = p.join("none.ckpt");
    assert_eq!(
        code(&condmatch(&["eval", "--data", s(&test), "--checkpoint", s(&missing)])),
        2
    );
    let bad = p.join("bad.ckpt");
    fs::write(&bad, b"{\"format\":\"x\"}\n\x00\x01").unwrap();
    assert_eq!(
        code(&condmatch(&["eval", "--data", s(&test), "--checkpoint", s(&bad)])),
        2
    );
}

#[test]
fn gradcheck_reports_and_fails_above_tolerance() {
    let o = condmatch(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["passed"], true);
    assert_eq!(code(&condmatch(&["gradcheck", "--tolerance", "1e-12"])), 2);
}
