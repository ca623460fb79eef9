use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn goalcraft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goalcraft")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// A configuration small enough to train in seconds.
fn micro_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "env": {"episode_len": 64},
        "encoder": {"hidden": 8, "layers": 1, "heads": 2, "pool_heads": 2},
        "policy": {"blocks": 1, "memory": 8},
        "idm": {"hidden": 8, "heads": 2, "layers": 1, "epochs": 1, "labeled_fraction": 0.5},
        "train": {"chunk_len": 8, "batch_size": 4, "epochs": 1, "warmup_steps": 2, "text": {"epochs": 1}},
        "inference": {"steps": 20, "bias_len": 16},
        "eval": {"episodes_per_task": 2, "task_steps": 20, "matches": 40, "clips_per_category": 2, "anchor": "random"}
    });
    let path = dir.join("micro.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = goalcraft(&["fly"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"chunk_len": 32}, "env": {"episode_len": 16}}"#).unwrap();
    let out = goalcraft(&["gen-data", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    std::fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    let out = goalcraft(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = goalcraft(&["train", "--data", "/nonexistent/data.mtrj", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn grad_check_passes_on_the_micro_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out_dir = dir.path().join("gc");
    let out = goalcraft(&["grad-check", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let err: f64 = text.trim().strip_prefix("max_rel_error ").unwrap().parse().unwrap();
    assert!(err <= 1e-4);
    assert_eq!(manifest(&out_dir)["summary"]["max_rel_error"].as_f64().unwrap(), err);
}

#[test]
fn full_pipeline_writes_outputs_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let sub = |name: &str| dir.path().join(name);
    let run = |args: &[&str]| {
        let out = goalcraft(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };

    let data = sub("data");
    run(&["gen-data", "--config", cfg, "--out", data.to_str().unwrap(), "--episodes", "3", "--seed", "4"]);
    let traj = data.join("trajectories.mtrj");
    assert!(traj.exists());
    let m = manifest(&data);
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["config"]["train"]["chunk_len"], 8);
    assert_eq!(m["config"]["train"]["seed"], 4);
    assert_eq!(m["summary"]["trajectories"], 15);
    let again = sub("again");
    run(&["gen-data", "--config", cfg, "--out", again.to_str().unwrap(), "--episodes", "3", "--seed", "4"]);
    assert_eq!(std::fs::read(&traj).unwrap(), std::fs::read(again.join("trajectories.mtrj")).unwrap());
    let traj = traj.to_str().unwrap();

    let idm = sub("idm");
    let out = run(&["train-idm", "--config", cfg, "--out", idm.to_str().unwrap(), "--data", traj]);
    assert!(stdout(&out).starts_with("accuracy "));
    let pseudo = sub("pseudo");
    let out = run(&[
        "pseudo-label",
        "--config",
        cfg,
        "--out",
        pseudo.to_str().unwrap(),
        "--data",
        traj,
        "--idm",
        idm.join("idm.mckp").to_str().unwrap(),
    ]);
    assert!(stdout(&out).starts_with("agreement "));
    assert!(pseudo.join("pseudo.mtrj").exists());

    let model = sub("model");
    run(&["train", "--config", cfg, "--out", model.to_str().unwrap(), "--data", traj]);
    let ck = model.join("checkpoint.mckp");
    assert!(ck.exists());
    let metrics = std::fs::read_to_string(model.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let ck = ck.to_str().unwrap();

    let roll = sub("roll");
    let goal_ref = format!("{traj}:0:0:8");
    run(&[
        "rollout",
        "--config",
        cfg,
        "--out",
        roll.to_str().unwrap(),
        "--checkpoint",
        ck,
        "--goal-ref",
        &goal_ref,
        "--episodes",
        "2",
        "--lambda",
        "1.5",
    ]);
    let logs = std::fs::read_to_string(roll.join("episodes.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 2);
    let first: Value = serde_json::from_str(logs.lines().next().unwrap()).unwrap();
    assert_eq!(first["total_steps"], 20);

    let chain = sub("chain");
    let stage1 = format!("{traj}:0:0:8;inventory.wood >= 1;10");
    let stage2 = format!("{traj}:6:0:8;never;10");
    run(&[
        "chain",
        "--config",
        cfg,
        "--out",
        chain.to_str().unwrap(),
        "--checkpoint",
        ck,
        "--stage",
        &stage1,
        "--stage",
        &stage2,
    ]);
    assert!(manifest(&chain)["summary"]["total_steps"].as_u64().unwrap() <= 20);
    let bad_stage = format!("{traj}:0:0:8;inventory.gold >= 1;10");
    let out = goalcraft(&["chain", "--config", cfg, "--out", chain.to_str().unwrap(), "--checkpoint", ck, "--stage", &bad_stage]);
    assert_eq!(code(&out), 1);

    let elo = sub("elo");
    let agents = format!("expert,random,model={ck}");
    let out = run(&["tournament", "--config", cfg, "--out", elo.to_str().unwrap(), "--agents", &agents, "--refs", traj]);
    assert_eq!(stdout(&out).lines().count(), 3);
    let table: Value = serde_json::from_str(&std::fs::read_to_string(elo.join("elo.json")).unwrap()).unwrap();
    assert_eq!(table["ratings"]["random"], 1500.0);

    let report = sub("report");
    run(&["goal-report", "--config", cfg, "--out", report.to_str().unwrap(), "--checkpoint", ck, "--data", traj]);
    let csv = std::fs::read_to_string(report.join("embeddings.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    let text = sub("text");
    run(&["align-text", "--config", cfg, "--out", text.to_str().unwrap(), "--checkpoint", ck, "--data", traj]);
    assert!(text.join("checkpoint.mckp").exists());
}
