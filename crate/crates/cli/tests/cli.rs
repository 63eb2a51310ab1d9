use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn scida(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scida")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny(extra: Value) -> Value {
    let mut cfg = json!({
        "data": {"synthetic": {"config": {
            "num_classes": 4, "source_per_class": 5, "target_count": 10, "max_labels": 3, "side": 16,
            "shift": {"color_jitter": 0.25, "blur_radius": 1, "downscale": 1.5},
            "source_noise": 0.03, "affinity": null, "forced_pairs": []
        }, "seed": 3}},
        "num_classes": 4, "side": 16, "input_pool": 1, "feature_dim": 8, "embed_dim": 4,
        "channels": [3, 4, 4, 6], "head_hidden": 8, "max_epochs": 3, "warmup_epochs": 1,
        "delta": 0.5, "conv_eps": 0.0
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    cfg
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny(json!({})));
    let run = dir.path().join("run");

    let out = scida(&["train", "--config", &cfg, "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let last: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(last["epoch"], 3);
    for f in ["config.json", "run.json", "checkpoints/latest.ckpt", "checkpoints/epoch_0002.ckpt", "report/curve.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let data = dir.path().join("data");
    assert_eq!(code(&scida(&["gen-synth", "--config", &cfg, "--out", s(&data)])), 0);
    assert!(data.join("source/annotations.json").is_file());
    let out = scida(&["eval", "--ckpt", s(&run.join("checkpoints/latest.ckpt")), "--data", s(&data.join("target"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    for mode in ["all", "top3"] {
        for key in ["op", "or", "of1", "of2"] {
            assert!(v[mode][key].is_f64(), "{mode}.{key}");
        }
    }

    std::fs::remove_dir_all(run.join("report")).unwrap();
    assert_eq!(code(&scida(&["report", "--run", s(&run)])), 0);
    assert!(run.join("report/metrics.json").is_file());
}

#[test]
fn resume_and_mode_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny(json!({})));
    let full = dir.path().join("full");
    let first = scida(&["train", "--config", &cfg, "--out", s(&full)]);
    assert_eq!(code(&first), 0);

    let resumed = dir.path().join("resumed");
    let ckpt = full.join("checkpoints/epoch_0002.ckpt");
    let out = scida(&["train", "--config", &cfg, "--out", s(&resumed), "--resume", s(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out), stdout(&first));

    let baseline = dir.path().join("baseline");
    let out = scida(&["train", "--config", &cfg, "--out", s(&baseline), "--mode", "source_only"]);
    assert_eq!(code(&out), 0);
    let copied: Value = serde_json::from_str(&std::fs::read_to_string(baseline.join("config.json")).unwrap()).unwrap();
    assert_eq!(copied["mode"], "source_only");
    let last: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(last["dis"].is_null());
}

#[test]
fn trains_from_mai_directories() {
    let dir = tempfile::tempdir().unwrap();
    let synth = write(dir.path(), "synth.json", &tiny(json!({})));
    let data = dir.path().join("data");
    assert_eq!(code(&scida(&["gen-synth", "--config", &synth, "--out", s(&data)])), 0);
    let mai = tiny(json!({
        "data": {"mai": {"source": s(&data.join("source")), "target": s(&data.join("target"))}},
        "max_epochs": 2
    }));
    let cfg = write(dir.path(), "mai.json", &mai);
    let out = scida(&["train", "--config", &cfg, "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablation_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny(json!({"max_epochs": 2})));
    let out_dir = dir.path().join("abl");
    let out = scida(&["ablate-delta", "--config", &cfg, "--deltas", "0.25,0.5", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("delta,n_delta,epochs"));
    assert!(lines[1].starts_with("0.25,1,2,"));
    assert!(out_dir.join("ablation.csv").is_file());
    assert!(out_dir.join("ablation.png").is_file());
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");

    let bad_key = write(dir.path(), "bad.json", &tiny(json!({"learning_rate": 0.1})));
    assert_eq!(code(&scida(&["train", "--config", &bad_key, "--out", s(&run)])), 2);

    let bad_delta = write(dir.path(), "delta.json", &tiny(json!({"delta": 0.0})));
    assert_eq!(code(&scida(&["train", "--config", &bad_delta, "--out", s(&run)])), 2);

    let missing = dir.path().join("nope.json");
    assert_eq!(code(&scida(&["train", "--config", s(&missing), "--out", s(&run)])), 2);

    assert_eq!(code(&scida(&["train", "--out", s(&run)])), 2);

    let data = dir.path().join("missing-data");
    assert_eq!(code(&scida(&["eval", "--ckpt", s(&dir.path().join("x.ckpt")), "--data", s(&data)])), 3);
    assert_eq!(code(&scida(&["report", "--run", s(&dir.path().join("no-run"))])), 3);

    let diverging = write(dir.path(), "div.json", &tiny(json!({"lr_dwc": 1e30})));
    let out = scida(&["train", "--config", &diverging, "--out", s(&run)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}
