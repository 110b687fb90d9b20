//! End-to-end runs of the `kcp` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use kcp_core::ckpt::{load_checkpoint, save_checkpoint};
use kcp_core::metrics::conv_flops;
use kcp_core::{MaskSet, ModelGraph, ModelState};
use serde_json::Value;

fn kcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kcp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run kcp")
}

fn ok_json(args: &[&str]) -> Value {
    let out = kcp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn archs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../archs")
}

fn arch(name: &str) -> String {
    archs().join(format!("{name}.json")).display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

const SMALL: &str = "synth:3,240,4,16,2.0";

#[test]
fn flops_anchors() {
    for (depth, anchor) in [(20, 4.06e7), (32, 6.89e7), (56, 1.25e8), (110, 2.53e8)] {
        let t = Instant::now();
        let v = ok_json(&["flops", "--arch", &arch(&format!("resnet{depth}")), "--json"]);
        let flops = v["flops"].as_f64().unwrap();
        assert!((flops - anchor).abs() / anchor <= 0.02, "resnet{depth}: {flops}");
        assert!(t.elapsed().as_secs_f64() < 1.0);
    }
}

#[test]
fn flops_of_half_masked_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let g = ModelGraph::resnet_cifar(20, 10).unwrap();
    let mut masks = MaskSet::all_kept(&g);
    let layers: Vec<usize> = masks.iter().map(|(l, _)| l).collect();
    for l in layers {
        let mut m = masks.get(l).unwrap().clone();
        let (o, i) = m.shape();
        for n in 0..o {
            for k in 0..i {
                if (n * i + k) % 2 == 0 {
                    m.prune(n, k);
                }
            }
        }
        masks.insert(l, m);
    }
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&g, &ModelState::init(&g, 0), Some(&masks), &path).unwrap();
    let v = ok_json(&["flops", &s(&path), "--json"]);
    let masked = v["masked_flops"].as_f64().unwrap();
    let linear = v["flops"].as_f64().unwrap() - v["conv_flops"].as_f64().unwrap();
    let half = conv_flops(&g).unwrap() as f64 / 2.0;
    // the 3-channel stem has an odd kernel count per filter
    assert!(((masked - linear) - half).abs() / half < 0.01, "{masked} vs {half}");
}

#[test]
fn train_on_noiseless_data_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let v = ok_json(&[
        "train", "--arch", &arch("tinycnn"), "--data", "synth:1,400,4,16,inf", "--seed", "0",
        "--epochs", "5", "--out", &s(&out), "--json",
    ]);
    assert_eq!(v["eval_accuracy"].as_f64().unwrap(), 1.0);
    for f in ["model.ckpt", "report.json", "report.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn single_batch_memorization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // 16 samples seen in 4 steps per epoch
    let data = "synth:4,16,4,16,4.0";
    ok_json(&[
        "train", "--arch", &arch("tinycnn"), "--data", data, "--eval-data", data, "--seed", "1",
        "--epochs", "50", "--batch-size", "4", "--weight-decay", "0", "--out", &s(&out), "--json",
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 50);
    let loss = records[49]["train_loss"].as_f64().unwrap();
    assert!(loss < 0.01, "loss at epoch 50: {loss}");
    let ev = ok_json(&["eval", &s(&out.join("model.ckpt")), "--data", data, "--json"]);
    assert_eq!(ev["accuracy"].as_f64().unwrap(), 1.0);
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok_json(&[
            "train", "--arch", &arch("tinycnn"), "--data", SMALL, "--seed", "7", "--epochs", "2",
            "--out", &s(&out), "--json",
        ]);
        let pruned = dir.path().join(format!("{name}-pruned"));
        ok_json(&[
            "prune", &s(&out.join("model.ckpt")), "--data", SMALL, "--seed", "7", "--epochs", "2",
            "--sparsity", "0.5", "--out", &s(&pruned), "--json",
        ]);
        ["model.ckpt", "report.json", "report.csv"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .chain(["pruned.ckpt", "report.json", "report.csv"].iter().map(|f| std::fs::read(pruned.join(f)).unwrap()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn prune_reaches_target_and_distills() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    ok_json(&[
        "train", "--arch", &arch("tinycnn"), "--data", SMALL, "--seed", "0", "--epochs", "2", "--out", &s(&base),
        "--json",
    ]);
    let ckpt = s(&base.join("model.ckpt"));
    let out = dir.path().join("pruned");
    let v = ok_json(&[
        "prune", &ckpt, "--data", SMALL, "--seed", "0", "--sparsity", "0.5", "--epochs", "10", "--distill", &ckpt,
        "--alpha", "0.9", "--temperature", "15", "--out", &s(&out), "--json",
    ]);
    assert!((v["kernel_sparsity"].as_f64().unwrap() - 0.5).abs() < 0.01);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for r in report["records"].as_array().unwrap() {
        assert!(r["fd_loss"].as_f64().is_some());
        assert!(r["task_loss"].as_f64().is_some());
    }
    let ck = load_checkpoint(&out.join("pruned.ckpt")).unwrap();
    for (_, m) in ck.masks.iter() {
        assert!((m.pruned_count() as f64 / m.len() as f64 - 0.5).abs() <= 1.0 / m.len() as f64);
    }
    let flops = ok_json(&["flops", &s(&out.join("pruned.ckpt")), "--json"]);
    assert!(flops["masked_flops"].as_u64().unwrap() < flops["flops"].as_u64().unwrap());
}

#[test]
fn eval_of_zero_model_is_chance_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let g = ModelGraph::tinycnn([1, 16, 16], 2);
    let path = dir.path().join("zero.ckpt");
    let mut state = ModelState::zeros(&g);
    for layer in &mut state.layers {
        for p in &mut layer.params {
            p.fill(0.0);
        }
    }
    save_checkpoint(&g, &state, None, &path).unwrap();
    let args = ["eval", &s(&path), "--data", "synth:5,200,2,16,2.0", "--json"];
    let a = ok_json(&args);
    assert_eq!(a["accuracy"].as_f64().unwrap(), 0.5);
    assert_eq!(a, ok_json(&args));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("from-config");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "arch": arch("tinycnn"),
            "data": SMALL,
            "seed": 3,
            "epochs": 5,
            "out": s(&out),
        })
        .to_string(),
    )
    .unwrap();
    let v = ok_json(&["train", "--config", &s(&cfg), "--epochs", "1", "--json"]);
    assert_eq!(v["epochs"].as_u64().unwrap(), 1);
    assert_eq!(v["seed"].as_u64().unwrap(), 3);
    std::fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(kcp(&["train", "--config", &s(&cfg)]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // every config problem is listed before exiting
    let out = kcp(&["train", "--sparsity", "0.5", "--lr=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["--seed", "--out", "--arch", "--data", "lr"] {
        assert!(err.contains(needle), "{needle} missing from: {err}");
    }
    assert_eq!(kcp(&["train", "--bogus"]).status.code(), Some(2));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"XXXXjunkjunkjunkjunk").unwrap();
    let out = kcp(&["eval", &s(&junk), "--data", SMALL]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a checkpoint"));

    let nan = kcp(&[
        "train", "--arch", &arch("tinycnn"), "--data", SMALL, "--seed", "0", "--epochs", "1", "--lr", "1e30",
        "--out", &s(&dir.path().join("nan")),
    ]);
    assert_eq!(nan.status.code(), Some(4), "{}", String::from_utf8_lossy(&nan.stderr));

    let bad_prune = kcp(&[
        "prune", &s(&junk), "--data", SMALL, "--seed", "0", "--sparsity", "1.5", "--out", &s(&dir.path().join("p")),
    ]);
    assert_eq!(bad_prune.status.code(), Some(2));
}

#[test]
fn tap_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let g = ModelGraph::tinycnn([1, 16, 16], 4);
    let student = dir.path().join("student.ckpt");
    save_checkpoint(&g, &ModelState::init(&g, 0), None, &student).unwrap();
    let out = kcp(&[
        "prune", &s(&student), "--data", SMALL, "--seed", "0", "--distill", &s(&student), "--tap", "99", "--out",
        &s(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_merges_runs() {
    let dir = tempfile::tempdir().unwrap();
    for (name, seed) in [("r1", "1"), ("r2", "2")] {
        ok_json(&[
            "train", "--arch", &arch("tinycnn"), "--data", SMALL, "--seed", seed, "--epochs", "2", "--out",
            &s(&dir.path().join(name)), "--json",
        ]);
    }
    let merged = dir.path().join("all.csv");
    let out = kcp(&["report", &s(&dir.path().join("r1")), &s(&dir.path().join("r2").join("report.json")), "--out", &s(&merged)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&merged).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("run,graph,seed,epoch"));
    assert!(lines[1].starts_with("r1,tinycnn,1,1"));
    assert!(lines[4].starts_with("r2,tinycnn,2,2"));
}
