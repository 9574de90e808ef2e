//! End-to-end contract tests for the command-line interface: flags, exit
//! codes and emitted files, run against the actual binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowdistill"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 11,
        "out_dir": dir.join("work").to_str().unwrap(),
        "data": {
            "frames": 2, "feature_dim": 2, "cond_len": 8, "cond_channels": 1,
            "count": 96, "seed": 11, "noise_sigma": 0.05
        },
        "net": {"hidden": 8, "blocks": 1, "heads": 2, "time_embed_dim": 8, "context": {"k": 3}},
        "teacher": {"steps": 4, "batch_size": 4},
        "dmd": {"steps": 2, "critic_per_gen": 1, "batch_size": 4},
        "pad": [
            {"k": 1, "target_schedule": [1.0, 0.75, 0.5], "prev_final_t": 0.25, "steps": 2, "warmup": 1, "batch_size": 4},
            {"k": 2, "target_schedule": [1.0, 0.75], "prev_final_t": 0.5, "steps": 2, "warmup": 1, "batch_size": 4},
            {"k": 3, "target_schedule": [1.0], "prev_final_t": 0.75, "steps": 2, "warmup": 1, "batch_size": 4}
        ],
        "eval": {"n_eval": 64}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn write_tiny_spec(dir: &Path) -> std::path::PathBuf {
    let spec = serde_json::json!({
        "frames": 2, "feature_dim": 2, "cond_len": 8, "cond_channels": 1,
        "count": 96, "seed": 11, "noise_sigma": 0.05
    });
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path
}

#[test]
fn unknown_flag_exits_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.bin");
    let status = bin()
        .args(["gen-data", "--bogus-flag", "x", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_data_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let output = bin()
        .args(["train-teacher", "--config"])
        .arg(&cfg)
        .args(["--data", "/nonexistent/by-design.bin", "--out"])
        .arg(dir.path().join("t.bin"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error: kind=data"), "stderr: {stderr}");
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"pad": []}"#).unwrap();
    let output = bin()
        .args(["train-teacher", "--config"])
        .arg(&path)
        .args(["--data", "x.bin", "--out", "y.bin"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("kind=config"));
}

#[test]
fn pipeline_subcommands_and_eval_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let spec = write_tiny_spec(dir.path());
    let data = dir.path().join("data.bin");

    let status = bin()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .args(["--count", "96", "--seed", "11"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(data.exists());

    let teacher = dir.path().join("teacher.bin");
    let status = bin()
        .args(["train-teacher", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&teacher)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let dmd = dir.path().join("dmd.bin");
    let status = bin()
        .args(["distill-dmd", "--teacher"])
        .arg(&teacher)
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&dmd)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let pad_dir = dir.path().join("pad");
    let status = bin()
        .args(["distill-pad", "--init"])
        .arg(&dmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .args(["--stages", "1,2,3", "--out"])
        .arg(&pad_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // Three stage checkpoints with the fixed schedules.
    for (k, steps) in [(1, vec![1.0, 0.75, 0.5]), (2, vec![1.0, 0.75]), (3, vec![1.0])] {
        let sidecar = pad_dir.join(format!("pad_stage{k}.json"));
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(meta["stage"], k);
        let sched: Vec<f64> =
            meta["schedule"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(sched, steps);
    }

    // Eval at one evaluation per sample appends a metrics row.
    let metrics = dir.path().join("m.csv");
    let status = bin()
        .args(["eval", "--ckpt"])
        .arg(pad_dir.join("pad_stage3.bin"))
        .args(["--nfe", "1", "--data"])
        .arg(&data)
        .args(["--n-eval", "64", "--out"])
        .arg(&metrics)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("cell_id,"));
    let row = lines.next().unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "eval");
    assert_eq!(fields[10], "1", "nfe column: {row}");

    // Report over the one-row table.
    let plots = dir.path().join("plots");
    let status = bin()
        .args(["report", "--in"])
        .arg(&metrics)
        .arg("--plots")
        .arg(&plots)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(plots.join("summary.md").exists());
    assert!(plots.join("fd_vs_nfe.svg").exists());

    // Empty table: data error, exit 3.
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "cell_id,step_reduction,dynamic_ts,self_compare,loss_kind,lambda,seed,fd,energy,sync,nfe,wall_ms\n").unwrap();
    let status = bin().args(["report", "--in"]).arg(&empty).arg("--plots").arg(&plots).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn ablate_tiny_grid_writes_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let spec = write_tiny_spec(dir.path());
    let data = dir.path().join("data.bin");
    bin().args(["gen-data", "--spec"]).arg(&spec).arg("--out").arg(&data).status().unwrap();

    let grid = serde_json::json!({
        "toggles": [
            {"step_reduction": false, "dynamic_ts": false, "self_compare": false},
            {"step_reduction": true, "dynamic_ts": true, "self_compare": true}
        ],
        "loss_kinds": ["r3gan"],
        "lambdas": [0.5],
        "seeds": [11]
    });
    let grid_path = dir.path().join("grid.json");
    std::fs::write(&grid_path, serde_json::to_string(&grid).unwrap()).unwrap();

    let table = dir.path().join("table.csv");
    let status = bin()
        .args(["ablate", "--grid"])
        .arg(&grid_path)
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&table)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3, "header + 2 cells: {text}");

    // Resume: nothing to do, table unchanged.
    let status = bin()
        .args(["ablate", "--grid"])
        .arg(&grid_path)
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&table)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&table).unwrap(), text);
}
