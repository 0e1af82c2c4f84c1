use std::fs;
use std::path::Path;
use std::process::Command;

fn ddatr(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_ddatr")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "ddatr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "seed": 1,
        "widths": [4, 6, 6, 8],
        "text_width": 8,
        "dec_layers": 1,
        "dec_width": 8,
        "dec_heads": 2,
        "dec_ff_width": 16,
        "max_gen_len": 10,
        "epochs": 1,
        "batch_size": 8,
        "lr": 0.001,
        "train_data": dir.join("train").display().to_string(),
        "test_data": dir.join("test").display().to_string(),
        "out_dir": dir.join("run").display().to_string(),
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = d.join("train").display().to_string();
    let test = d.join("test").display().to_string();
    let msg = ddatr(&["gen-data", "--out", &train, "--seed", "1", "--patients", "12"]);
    assert!(msg.contains("24 records (12 with prior)"), "{msg}");
    ddatr(&["gen-data", "--out", &test, "--seed", "2", "--patients", "4"]);
    assert!(d.join("train/manifest.jsonl").exists());

    let cfg = write_config(d);
    ddatr(&["train", "--config", &cfg]);
    let ck = d.join("run/checkpoint.json");
    assert!(ck.exists());
    let steps = fs::read_to_string(d.join("run/steps.csv")).unwrap();
    assert_eq!(steps.lines().next().unwrap(), "epoch,step,lm,ce_cur,ce_prior,total");
    assert_eq!(steps.lines().count(), 1 + 3);

    let ck = ck.display().to_string();
    let eval_dir = d.join("eval0").display().to_string();
    let out = ddatr(&["eval", "--checkpoint", &ck, "--split", "fraction=0", "--out", &eval_dir]);
    assert!(out.contains("\"n_with_prior\": 0"), "{out}");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval0/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metrics"]["n_samples"], 4);
    assert!(d.join("eval0/metrics.csv").exists());

    let gen_dir = d.join("gen").display().to_string();
    ddatr(&["generate", "--checkpoint", &ck, "--out", &gen_dir]);
    assert_eq!(fs::read_dir(d.join("gen/reports")).unwrap().count(), 8);
}

#[test]
fn f64_training_and_ablation_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = d.join("train").display().to_string();
    ddatr(&["gen-data", "--out", &train, "--seed", "3", "--patients", "6"]);
    let cfg = write_config(d);
    let out = d.join("nodam").display().to_string();
    ddatr(&["train", "--config", &cfg, "--precision", "f64", "--ablation", "no-dam", "--out", &out, "--seed", "4"]);
    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("nodam/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["precision"], "f64");
    assert_eq!(ck["config"]["ddam_enabled"], false);
    assert_eq!(ck["config"]["seed"], 4);
    let names: Vec<&str> = ck["params"].as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    assert!(names.iter().all(|n| !n.starts_with("ddam")));
}

#[test]
fn gradcheck_reports_every_block() {
    let out = ddatr(&["gradcheck"]);
    for block in ["dfam", "ldconv", "ddam", "backbone-stage", "classifier", "decoder"] {
        assert!(out.contains(block), "{out}");
    }
    assert!(!out.contains("FAIL"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let run = |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_ddatr")).args(args).output().unwrap();
    assert!(!run(&["train", "--ablation", "no-everything"]).status.success());
    assert!(!run(&["eval", "--checkpoint", "/nonexistent/ck.json"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert!(!run(&["train", "--config", &cfg]).status.success());
}
