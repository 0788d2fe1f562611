//! Behaviour of the `discluster` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_discluster");

const TINY: &str = r#"{
  "data": { "task": { "kind": "two_moons", "n": 60 } },
  "model": { "extractor_dims": [8, 8], "classifier_hidden": 4 },
  "schedule": { "epochs": 3, "batch_size": 32 }
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DISCLUSTER_OUT_DIR").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let o = run(&["train", "--config", "/nowhere/cfg.json", "--out", "/tmp/unused-discluster"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]: "), "{err}");
    assert!(err.contains("/nowhere/cfg.json"));
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_key_and_bad_usage_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "schedule": { "epochs": 2, "learning_rate": 0.1 } }"#);
    let o = run(&["train", "--config", &cfg, "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    let o = run(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[config]: usage:"));

    let o = run(&["ablate", "--config", &write_config(dir.path(), TINY), "--variants", "full,bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn train_writes_outputs_and_resolved_config_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out1 = dir.path().join("run1");
    let o = run(&["train", "--config", &cfg, "--seed", "17", "--out", s(&out1)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out1.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["overall"].is_f64() && v["target_acc"].is_f64());
    }
    assert!(out1.join("checkpoint.bin").exists());

    let resolved = out1.join("config.resolved.json");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&resolved).unwrap()).unwrap();
    assert_eq!(r["run"]["seed"], 17);

    let out2 = dir.path().join("run2");
    let o = run(&["train", "--config", s(&resolved), "--out", s(&out2)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out2.join("metrics.jsonl")).unwrap(), metrics);
    assert_eq!(fs::read(out2.join("checkpoint.bin")).unwrap(), fs::read(out1.join("checkpoint.bin")).unwrap());
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("from-env");
    let o = Command::new(BIN)
        .args(["train", "--config", &cfg])
        .env("DISCLUSTER_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics.jsonl").exists());
}

#[test]
fn ablate_table_matches_trial_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("ab");
    let o = run(&["ablate", "--config", &cfg, "--trials", "1", "--variants", "source_only,full", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "variant,label,mean,sd,trial_0");
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        let mean: f64 = cells[2].parse().unwrap();
        let trial = fs::read_to_string(out.join("trials").join(format!("{}_trial0.jsonl", cells[0]))).unwrap();
        let last: serde_json::Value = serde_json::from_str(trial.lines().last().unwrap()).unwrap();
        assert_eq!(last["target_acc"].as_f64().unwrap(), mean);
    }
    let printed = stdout(&o);
    assert!(printed.contains("Source Only") && printed.contains("DisClusterDA"), "{printed}");
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let o = run(&["gradcheck", "--eps", "1e-5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("eps = 1e-5"), "{text}");
    assert_eq!(text.matches("PASS").count(), 16, "{text}");

    let o = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[runtime]: "));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn synth_is_deterministic_and_uses_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["synth", "--task", "two-moons", "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["source.csv", "target.csv", "scatter.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let scatter = fs::read_to_string(a.join("scatter.tsv")).unwrap();
    assert_eq!(scatter.lines().next().unwrap(), "x\ty\tlabel\tdomain");
    assert_eq!(scatter.lines().count(), 801);

    let cfg = write_config(dir.path(), TINY);
    let run_dir = dir.path().join("trained");
    assert!(run(&["train", "--config", &cfg, "--out", s(&run_dir)]).status.success());
    let c = dir.path().join("c");
    let o = run(&[
        "synth",
        "--task",
        "two-moons",
        "--out",
        s(&c),
        "--checkpoint",
        s(&run_dir.join("checkpoint.bin")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scatter = fs::read_to_string(c.join("scatter.tsv")).unwrap();
    assert_eq!(scatter.lines().next().unwrap(), "x\ty\tlabel\tdomain\tpredicted");
    assert!(scatter.lines().skip(1).all(|l| l.split('\t').count() == 5));

    let o = run(&["synth", "--task", "blobs", "--out", s(&c), "--checkpoint", s(&dir.path().join("none.bin"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn baselines_write_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let km = dir.path().join("km");
    let o = run(&["baseline", "--config", &cfg, "--kind", "kmeans", "--rounds", "1", "--epochs-per-round", "1", "--out", s(&km)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(km.join("baseline.json")).unwrap()).unwrap();
    assert!(v.is_object());

    let em = dir.path().join("em");
    let o = run(&["baseline", "--config", &cfg, "--kind", "em", "--out", s(&em)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(em.join("metrics.jsonl")).unwrap().lines().count(), 3);
}
