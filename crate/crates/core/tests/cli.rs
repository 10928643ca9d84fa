use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsemp"))
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn sparsemp");
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path) {
    run(bin().args(["synth", "--classes", "40", "--features", "200", "--per-class", "8"]).args([
        "--test-per-class",
        "2",
        "--seed",
        "5",
        "--out",
        dir.join("train.txt").to_str().unwrap(),
        "--test-out",
        dir.join("test.txt").to_str().unwrap(),
    ]));
}

fn write_config(dir: &Path, name: &str, cluster: Value, out: &str) -> PathBuf {
    let cfg = json!({
        "version": 1,
        "network": {
            "input_dim": 200,
            "layers": [
                {"out_dim": 32, "activation": "relu", "sparsity": 0.5,
                 "lsh": {"family": "srp", "hashes_per_table": 4, "num_tables": 4, "seed": 2}},
                {"out_dim": 40, "activation": "softmax", "sparsity": 0.25,
                 "lsh": {"family": "dwta", "hashes_per_table": 3, "num_tables": 4, "seed": 3}}
            ],
            "seed": 11
        },
        "training": {"batch_size": 32, "epochs": 2, "optimizer": {"lr": 0.005}, "rebuild_period": 3, "shuffle_seed": 4},
        "data": {"train": "train.txt", "test": "test.txt"},
        "cluster": cluster,
        "output_dir": out
    });
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn summary(dir: &Path, out: &str) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join(out).join("summary.json")).unwrap()).unwrap()
}

#[test]
fn loopback_train_writes_summary_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = write_config(dir.path(), "run.json", json!({"transport": "loopback", "nodes": 2}), "out");
    run(bin().args(["train", "--config"]).arg(&cfg));

    let s = summary(dir.path(), "out");
    let losses = s["epoch_losses"].as_array().unwrap();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| l.as_f64().unwrap().is_finite()));
    assert!(s["total_payload_bytes"].as_u64().unwrap() > 0);
    assert!(s["bytes_by_phase"]["forward_gather"].as_u64().unwrap() > 0);
    assert!(s["precision_at_1"].as_f64().is_some());

    // 320 points in batches of 32, two epochs
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 20);
    assert!(dir.path().join("out/checkpoint/manifest.json").is_file());

    // same config, fresh output: identical digest
    let again = write_config(dir.path(), "again.json", json!({"transport": "loopback", "nodes": 2}), "out2");
    run(bin().args(["train", "--config"]).arg(&again));
    assert_eq!(summary(dir.path(), "out2")["digest"], s["digest"]);

    let eval = run(bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("out/checkpoint"))
        .arg("--config")
        .arg(&cfg));
    let report: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["precision_at_1"], s["precision_at_1"]);
}

#[test]
fn resume_continues_from_the_last_epoch() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = write_config(dir.path(), "run.json", json!({"transport": "loopback", "nodes": 2}), "out");
    run(bin().args(["train", "--config"]).arg(&cfg).env("SPARSEMP_TRAINING__EPOCHS", "1"));
    run(bin().args(["train", "--resume", "--config"]).arg(&cfg));
    let resumed = summary(dir.path(), "out");
    assert_eq!(resumed["resumed_from_epoch"], json!(1));

    let full = write_config(dir.path(), "full.json", json!({"transport": "loopback", "nodes": 2}), "full");
    run(bin().args(["train", "--config"]).arg(&full));
    let metrics = |out: &str| -> Vec<Value> {
        std::fs::read_to_string(dir.path().join(out).join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    assert_eq!(metrics("out"), metrics("full"));
}

#[test]
fn tcp_nodes_match_the_loopback_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let loop_cfg = write_config(dir.path(), "loop.json", json!({"transport": "loopback", "nodes": 2}), "loop");
    run(bin().args(["train", "--config"]).arg(&loop_cfg));

    let listeners: Vec<_> = (0..2).map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let peers: Vec<String> = listeners.iter().map(|l| l.local_addr().unwrap().to_string()).collect();
    drop(listeners);
    let tcp_cfg = write_config(
        dir.path(),
        "tcp.json",
        json!({"transport": "tcp", "peers": peers, "timeout_secs": 30}),
        "tcp",
    );
    let children: Vec<_> = (0..2)
        .map(|r| {
            bin()
                .args(["train", "--node-id", &r.to_string(), "--config"])
                .arg(&tcp_cfg)
                .stdout(std::process::Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in children {
        assert!(c.wait().unwrap().success());
    }
    assert_eq!(summary(dir.path(), "tcp")["digest"], summary(dir.path(), "loop")["digest"]);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", json!({"transport": "loopback", "nodes": 2}), "out");
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.train"));

    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    synth(dir.path());
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .env("SPARSEMP_NETWORK__LAYERS__1__SPARSITY", "0.001")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out/metrics.jsonl").exists());
}
