use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ailora::analysis::mean_entropy;
use ailora::model::task::{SynthTask, TaskKind};
use ailora::model::train::load_model;
use ailora::TensorStore;
use serde_json::Value;

fn ailora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ailora")).args(args).env("AILORA_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = ailora(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    ailora(args).status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &["--dim", "16", "--heads", "2", "--ffn-dim", "16", "--vocab", "8", "--seq-len", "6", "--samples", "48"];

fn pretrain_small(dir: &Path, epochs: &str) -> PathBuf {
    let out = dir.join("pre");
    let mut args = vec!["pretrain", "--epochs", epochs, "--out", p(&out)];
    args.extend_from_slice(SMALL);
    ok(&args);
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn decompose_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrain_small(dir.path(), "0");
    let ckpt = pre.join("checkpoint.tsr");
    let dec = dir.path().join("dec.tsr");
    ok(&["decompose", "--weights", p(&ckpt), "--rank", "3", "--kind", "minor", "--tensors", "layer*.q,layer1.v", "--out", p(&dec)]);
    let store = TensorStore::read(&dec).unwrap();
    let names: Vec<&str> = store.names().collect();
    assert_eq!(names.len(), 9);
    assert!(names.contains(&"layer1.v.residual") && !names.contains(&"layer0.v.a"));
    assert!(dir.path().join("dec.tsr.manifest.json").exists());

    let out = ailora(&["verify", "--weights", p(&ckpt), "--decomposition", p(&dec)]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["tensors"], 3);
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-10);

    let full = dir.path().join("full.tsr");
    ok(&["decompose", "--weights", p(&ckpt), "--rank", "16", "--kind", "principal", "--out", p(&full)]);
    let store = TensorStore::read(&full).unwrap();
    for (name, m) in store.iter().filter(|(n, _)| n.ends_with(".residual")) {
        assert!(m.max_abs() < 1e-10, "{name}");
    }

    assert_eq!(code(&["decompose", "--weights", p(&ckpt), "--rank", "0", "--out", p(&full)]), 2);
    assert_eq!(code(&["decompose", "--weights", p(&ckpt), "--rank", "17", "--out", p(&full)]), 2);
    assert_eq!(code(&["decompose", "--weights", p(&ckpt), "--rank", "2", "--kind", "major", "--out", p(&full)]), 2);
    assert_eq!(code(&["decompose", "--weights", "/nonexistent.tsr", "--rank", "2", "--out", p(&full)]), 2);
}

#[test]
fn pretrain_finetune_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrain_small(dir.path(), "2");
    for f in ["checkpoint.tsr", "curves.csv", "manifest.json"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let manifest = json(&pre.join("manifest.json"));
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["config"]["model"]["dim"], 16);
    assert_eq!(manifest["seeds"], serde_json::json!([11]));
    let ckpt = pre.join("checkpoint.tsr");

    let ft = dir.path().join("ft");
    let ft_args = ["finetune", "--checkpoint", p(&ckpt), "--scheme", "ailora", "--ranks", "q=4,v=4", "--epochs", "2", "--samples", "48", "--out", p(&ft)];
    ok(&ft_args);
    let csv = std::fs::read(ft.join("curves.csv")).unwrap();
    let bytes = std::fs::read(ft.join("checkpoint.tsr")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 3);
    ok(&ft_args);
    assert_eq!(std::fs::read(ft.join("curves.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(ft.join("checkpoint.tsr")).unwrap(), bytes);

    let ft_ckpt = ft.join("checkpoint.tsr");
    let sim = dir.path().join("sim");
    ok(&["analyze", "similarity", "--left", p(&ft_ckpt), "--right", p(&ft_ckpt), "--proj", "q", "--rank", "4", "--out", p(&sim)]);
    let r = json(&sim.join("report.json"));
    assert_eq!(r["metric"], "similarity");
    for v in r["per_layer"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - 1.0).abs() < 1e-9);
    }
    ok(&["analyze", "similarity", "--left", p(&ckpt), "--right", p(&ckpt), "--proj", "v", "--rank", "3", "--out", p(&sim)]);
    assert_eq!(json(&sim.join("report.json"))["per_layer"].as_array().unwrap().len(), 2);

    let dn = dir.path().join("dn");
    ok(&["analyze", "delta-norms", "--pretrained", p(&ckpt), "--finetuned", p(&ckpt), "--out", p(&dn)]);
    assert_eq!(json(&dn.join("report.json"))["per_layer"], serde_json::json!([0.0, 0.0]));
    ok(&["analyze", "delta-norms", "--pretrained", p(&ckpt), "--finetuned", p(&ft_ckpt), "--proj", "v", "--out", p(&dn)]);
    assert!(json(&dn.join("report.json"))["per_layer"].as_array().unwrap().iter().all(|v| v.as_f64().unwrap() > 0.0));
    ok(&["analyze", "delta-norms", "--pretrained", p(&ckpt), "--finetuned", p(&ft_ckpt), "--proj", "k", "--out", p(&dn)]);
    assert_eq!(json(&dn.join("report.json"))["per_layer"], serde_json::json!([0.0, 0.0]));

    let fg = dir.path().join("fg");
    ok(&["analyze", "forgetting", "--pretrained", p(&ckpt), "--finetuned", p(&ckpt), "--samples", "40", "--out", p(&fg)]);
    let value = json(&fg.join("report.json"))["value"].as_f64().unwrap();
    let store = TensorStore::read(&ckpt).unwrap();
    let eval = SynthTask { kind: TaskKind::Majority, seq_len: 6, vocab: 8, num_classes: 2, sample_count: 40, seed: 4321 }
        .generate()
        .unwrap();
    let entropy = mean_entropy(&load_model(&store, None).unwrap(), &eval.inputs).unwrap();
    assert!((value - entropy).abs() < 1e-12);
    ok(&["analyze", "forgetting", "--pretrained", p(&ckpt), "--finetuned", p(&ft_ckpt), "--head", "finetuned", "--out", p(&fg)]);
    assert_eq!(json(&fg.join("report.json"))["params"]["head"], "finetuned");
}

#[test]
fn multi_seed_and_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrain_small(dir.path(), "1").join("checkpoint.tsr");
    let ft = dir.path().join("seeds");
    ok(&["finetune", "--checkpoint", p(&ckpt), "--seeds", "23,37", "--ranks", "q=2,v=2", "--epochs", "1", "--samples", "32", "--out", p(&ft)]);
    for s in [23, 37] {
        assert!(ft.join(format!("seed_{s}/curves.csv")).exists());
    }
    assert_eq!(json(&ft.join("manifest.json"))["seeds"], serde_json::json!([23, 37]));

    let sw = dir.path().join("sweep");
    ok(&["sweep", "--checkpoint", p(&ckpt), "--ranks", "1,2,4", "--epochs", "1", "--samples", "32", "--out", p(&sw)]);
    for r in [1, 2, 4] {
        assert!(sw.join(format!("rank_{r}/curves.csv")).exists());
    }
    let summary = std::fs::read_to_string(sw.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.starts_with("rank,final_train_loss,final_eval_metric\n1,"));
}

#[test]
fn init_writes_zero_deviation_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrain_small(dir.path(), "1").join("checkpoint.tsr");
    let out = dir.path().join("init");
    ok(&["init", "--weights", p(&ckpt), "--scheme", "milora", "--ranks", "v=3", "--out", p(&out)]);
    let pre = TensorStore::read(&ckpt).unwrap();
    let adapters = TensorStore::read(&out.join("checkpoint.tsr")).unwrap();
    assert_eq!(adapters.meta("scheme"), Some("milora"));
    let merged = load_model(&pre, Some(&adapters)).unwrap().merged_store().unwrap();
    let w = pre.require("layer1.v").unwrap();
    assert!(merged.require("layer1.v").unwrap().relative_distance(w).unwrap() < 1e-10);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrain_small(dir.path(), "0").join("checkpoint.tsr");
    let o = p(&dir.path().join("x")).to_string();
    let base = ["finetune", "--checkpoint", p(&ckpt), "--epochs", "1", "--samples", "16", "--out", &o];
    let with = |extra: &[&str]| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        code(&v)
    };
    assert_eq!(with(&["--scheme", "dora"]), 2);
    assert_eq!(with(&["--ranks", "q=0"]), 2);
    assert_eq!(with(&["--ranks", "q=17"]), 2);
    assert_eq!(with(&["--alpha", "-1"]), 2);
    assert_eq!(with(&["--lr", "0"]), 2);
    assert_eq!(with(&["--seeds", "x"]), 2);
    let diverging = ["finetune", "--checkpoint", p(&ckpt), "--epochs", "3", "--samples", "16", "--lr", "1e7", "--ranks", "q=8,k=8,v=8,o=8", "--scheme", "pissa", "--out", &o];
    assert_eq!(code(&diverging), 4);
    assert_eq!(code(&["pretrain", "--dim", "10", "--heads", "3", "--out", &o]), 2);
    assert_eq!(code(&["pretrain", "--lr", "1e7", "--epochs", "2", "--out", &o, "--dim", "16", "--heads", "2", "--samples", "64"]), 4);
    assert_eq!(code(&["analyze", "similarity", "--left", p(&ckpt), "--right", p(&ckpt), "--rank", "99", "--out", &o]), 2);
    assert_eq!(code(&["bogus"]), 2);
}
