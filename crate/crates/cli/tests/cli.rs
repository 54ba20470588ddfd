use std::path::Path;
use std::process::{Command, Output};

use flexcoupler::experiments::{BaselineBlock, ExperimentConfig, Scheme, SweepBlock, SweepVariable};
use serde_json::Value;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.scenario.population.users = 2;
    c.scenario.population.antennas = 2;
    c.sampling.samples = 4;
    c.sampling.pretrain_rows = 60;
    c.sampling.finetune_rows = 12;
    c.sampling.evaluation_samples = 8;
    c.training.hidden = vec![8, 8, 4, 4];
    c.training.iterations = 40;
    c.training.finetune_iterations = 10;
    c.baseline = BaselineBlock { outer_iterations: 2, frames: 2 };
    c
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexcoupler")).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_json(o: &Output) -> Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().expect("error record on stderr");
    let v: Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["status"], "error");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    v
}

#[test]
fn run_writes_a_result_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("out");
    let o = cli(&["run", "--config", cfg.to_str().unwrap(), "--scheme", "fixed_antenna", "--seed", "4", "--out", out.to_str().unwrap()]);
    let v = stdout_json(&o);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["result"]["scheme"], "fixed_antenna");
    assert_eq!(v["result"]["seed"], 4);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_fixed_antenna_4.json")).unwrap()).unwrap();
    assert_eq!(file, v["result"]);
    assert!(out.join("config.toml").exists());
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.sweep = Some(SweepBlock {
        variable: SweepVariable::Rho,
        values: vec![0.5, 2.0],
        seeds: 2,
        schemes: vec![Scheme::FixedAntenna, Scheme::RotatableFixedPattern],
    });
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("out");
    let v = stdout_json(&cli(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(v["rows"], 4);
    let text = std::fs::read_to_string(out.join("sweep_rho.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sweep_var,scheme,mean_rate,std_rate,n_seeds,calls,seconds");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0.5,fixed_antenna,"));
    assert!(lines[4].starts_with("2,rotatable_fixed_pattern,"));
}

#[test]
fn offline_pipeline_chains_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let v = stdout_json(&cli(&["labelgen", "--config", cfg, "--out", o]));
    assert_eq!(v["rows"], 60);
    assert_eq!(v["solver_calls"], 60);
    let labels = out.join("labels_pretrain.txt");
    let v = stdout_json(&cli(&["train", "--config", cfg, "--out", o, "--data", labels.to_str().unwrap(), "--holdout", "0.8"]));
    assert!(v["mse"].as_f64().unwrap().is_finite());
    let h = &v["holdout"];
    assert_eq!(h["within_limit"], h["ratio"].as_f64().unwrap() <= h["limit"].as_f64().unwrap());
    let model = out.join("model.bin");
    stdout_json(&cli(&["labelgen", "--config", cfg, "--out", o, "--finetune"]));
    let v = stdout_json(&cli(&[
        "finetune",
        "--config",
        cfg,
        "--out",
        o,
        "--model",
        model.to_str().unwrap(),
        "--data",
        out.join("labels_finetune.txt").to_str().unwrap(),
    ]));
    // Fine-tuning keeps the best checkpoint, starting point included.
    assert!(v["mse_after"].as_f64().unwrap() <= v["mse_before"].as_f64().unwrap());
    let v = stdout_json(&cli(&["report", "--config", cfg, "--out", o, "--model", model.to_str().unwrap()]));
    let text = std::fs::read_to_string(out.join("report_0.txt")).unwrap();
    assert!(text.lines().any(|l| l == "position_loop_calls=0"));
    assert!(text.lines().any(|l| l == "online_calls=1"));
    assert!(v["rate"].as_f64().unwrap() > 0.0);
}

#[test]
fn unknown_keys_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny().to_toml_string().unwrap().replacen("[link]\n", "[link]\nbandwidth = 1.0\n", 1);
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let o = cli(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let v = error_json(&o);
    assert_eq!(v["kind"], "config");
    assert!(v["message"].as_str().unwrap().contains("bandwidth"));
}

#[test]
fn missing_schema_version_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny().to_toml_string().unwrap().replacen("schema_version = 1\n", "", 1);
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let v = error_json(&cli(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(v["kind"], "config");
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let v = error_json(&cli(&["run", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(v["kind"], "io");
}

#[test]
fn bad_arguments_are_usage_errors() {
    for args in [&["run", "--scheme", "teleport"][..], &["run", "--scale", "huge"], &["fly"], &["run", "--seed", "-3"]] {
        let o = cli(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(error_json(&o)["kind"], "usage");
    }
}

#[test]
fn sweep_without_a_sweep_block_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let v = error_json(&cli(&["sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(v["kind"], "config");
}
