use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coper(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coper"))
        .args(args)
        .env_remove("COPER_THREADS")
        .output()
        .expect("spawn coper")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

#[test]
fn rope_counterexample_json() {
    let o = coper(&["analyze", "rope-counterexample"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["rule_diff_first"], -1);
    assert_eq!(v["rule_diff_second"], 2);
    assert_eq!(v["verdict"], "not representable");
}

#[test]
fn gen_writes_manifest_and_splits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = coper(&["gen", "--profile", "coper-default", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "manifest.json",
        "train.jsonl",
        "test_id.jsonl",
        "test_hollow.jsonl",
        "test_extrapolation.jsonl",
    ] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert!(a.join("stamp.json").exists());
    assert_eq!(code(&coper(&["verify", a.to_str().unwrap()])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&coper(&["gen", "--profile", "nope", "--out", "x"])), 1);
    assert_eq!(code(&coper(&["gen", "--bogus"])), 1);
    assert_eq!(code(&coper(&[])), 1);
    assert_eq!(code(&coper(&["analyze", "premise", "--seq", "1,2", "--period", "5"])), 1);
    assert_eq!(code(&coper(&["--help"])), 0);
}

#[test]
fn corrupted_dataset_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(code(&coper(&["gen", "--profile", "addsub", "--seed", "2", "--out", d.to_str().unwrap()])), 0);
    let path = d.join("test_id.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    let target = rec["target"].as_str().unwrap().to_string();
    let flipped = match target.strip_prefix('0') {
        Some(rest) => format!("1{rest}"),
        None => format!("0{}", &target[1..]),
    };
    rec["target"] = flipped.into();
    lines[2] = rec.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = coper(&["verify", d.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("test_id.jsonl:3"));
}

#[test]
fn missing_directory_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = coper(&["verify", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "counts": { "train": 24, "test_id": 6, "test_hollow": 6, "test_extrapolation": 6 },
        "model": { "d_model": 16, "n_heads": 2, "ffn_mult": 2, "max_seq_len": 64 },
        "train": { "eval_every": 1 }
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_experiment_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = coper(&[
            "run-experiment",
            "single-period",
            "--pe",
            "rope",
            "--seed",
            "1",
            "--epochs",
            "2",
            "--layers",
            "1",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    for f in [
        "checkpoint/checkpoint.json",
        "checkpoint/checkpoint.bin",
        "runlog.csv",
        "runlog.json",
        "heatmap.csv",
        "heatmap.svg",
        "categories.csv",
        "categories.svg",
        "curves.svg",
        "summary.json",
        "stamp.json",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let profile: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("profile.json")).unwrap()).unwrap();
    assert_eq!(profile["model"]["n_layers"], 1);
    assert_eq!(profile["model"]["d_model"], 16);
    assert_eq!(profile["train"]["epochs"], 2);

    let b = run("b");
    for f in ["checkpoint/checkpoint.bin", "runlog.csv", "heatmap.svg", "summary.json", "eval.json"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let ev = dir.path().join("ev");
    let o = coper(&[
        "eval",
        "--checkpoint",
        a.join("checkpoint").to_str().unwrap(),
        "--data",
        a.join("dataset").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(ev.join("heatmap.csv")).unwrap() == fs::read(a.join("heatmap.csv")).unwrap());

    let pl = dir.path().join("pl");
    let o = coper(&["plot", "--run", a.to_str().unwrap(), "--out", pl.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["curves.svg", "heatmap.svg", "categories.csv"] {
        assert!(fs::read(pl.join(f)).unwrap() == fs::read(a.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn train_then_eval_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("t");
    let o = coper(&[
        "train",
        "--profile",
        "single-period",
        "--epochs",
        "1",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = dir.path().join("big");
    assert_eq!(code(&coper(&["gen", "--profile", "coper-default", "--paper", "--config", &cfg, "--out", data.to_str().unwrap()])), 0);
    let o = coper(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}
