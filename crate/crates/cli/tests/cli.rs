use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "num_classes": 3, "videos_per_class": 4, "frames_per_video": 8, "image_size": 16,
  "delta_max": 3, "pairs_per_video": 1, "batch_size": 4,
  "global_size": 16, "local_size": 8, "num_local_pairs": 1,
  "patch_size": 4, "embed_dim": 16, "depth": 2, "num_heads": 2,
  "head_hidden_dim": 32, "bottleneck_dim": 8, "num_prototypes": 10,
  "head_only_epochs": 1, "full_epochs": 1, "lora_layers": 1, "full_layers": 1, "lora_rank": 2,
  "pretrain_epochs": 1, "pretrain_num_local_pairs": 1
}"#;

fn vessa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vessa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vessa(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn pretrain_adapt_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let pre = dir.path().join("pre");
    let probe: serde_json::Value = serde_json::from_str(&ok(&[
        "pretrain", "--config", &cfg, "--out-dir", pre.to_str().unwrap(), "--threads", "1",
    ]))
    .unwrap();
    assert!(probe["source_accuracy"].is_number());
    let ckpt = pre.join("pretrained.ckpt");
    for f in ["config.json", "data_manifest.json", "metrics.jsonl", "final.ckpt"] {
        assert!(pre.join(f).exists(), "{f}");
    }

    let adapt = dir.path().join("adapt");
    let arm: serde_json::Value = serde_json::from_str(&ok(&[
        "adapt", "--config", &cfg, "--out-dir", adapt.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
        "--static-baseline",
    ]))
    .unwrap();
    assert_eq!(arm["steps"], 4);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(adapt.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["view_source"], "static");
    assert!(adapt.join("phase_boundary.ckpt").exists());
    assert!(adapt.join("result.json").exists());

    let report = dir.path().join("report.json");
    ok(&[
        "eval", "--config", &cfg, "--checkpoint", adapt.join("final.ckpt").to_str().unwrap(), "--k", "1", "--out",
        report.to_str().unwrap(),
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["k"], 1);
    assert_eq!(r["num_test"], 3);
}

#[test]
fn gen_data_then_eval_on_the_folder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out-dir", data.to_str().unwrap(), "--seed", "4"]);
    assert!(data.join("source/manifest.json").exists());
    assert!(data.join("target/manifest.json").exists());
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--config", &cfg, "--out-dir", pre.to_str().unwrap()]);
    let out = ok(&[
        "eval", "--config", &cfg, "--checkpoint", pre.join("pretrained.ckpt").to_str().unwrap(), "--dataset",
        data.join("source").to_str().unwrap(), "--domain", "source",
    ]);
    let r: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(r["num_train"].as_u64().unwrap() + r["num_test"].as_u64().unwrap(), 12);
}

#[test]
fn reproduce_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ta = ok(&["reproduce", "baselines-table3", "--config", &cfg, "--out-dir", a.to_str().unwrap()]);
    let tb = ok(&["reproduce", "baselines-table3", "--config", &cfg, "--out-dir", b.to_str().unwrap()]);
    assert_eq!(ta, tb);
    assert!(ta.contains("Static-baseline"));
    assert_eq!(std::fs::read(a.join("table.json")).unwrap(), std::fs::read(b.join("table.json")).unwrap());
    assert_eq!(
        std::fs::read(a.join("vessa/seed-0/metrics.jsonl")).unwrap(),
        std::fs::read(b.join("vessa/seed-0/metrics.jsonl")).unwrap()
    );
}

#[test]
fn sweep_delta_writes_a_row_per_spec() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("sweep");
    let md = ok(&[
        "sweep-delta", "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--delta", "1", "--delta", "2",
        "--delta", "random[2,3]",
    ]);
    assert_eq!(md.lines().filter(|l| l.starts_with("| delta")).count(), 3);
    assert!(out.join("table.json").exists());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = vessa(&["reproduce", "table99", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"delta_max": 0}"#).unwrap();
    let out = vessa(&["pretrain", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta_max"));

    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{"gama": 1}"#).unwrap();
    assert!(!vessa(&["pretrain", "--config", typo.to_str().unwrap()]).status.success());

    let out = vessa(&["sweep-delta", "--config", &cfg, "--delta", "random[2,9]"]);
    assert!(!out.status.success());
}
