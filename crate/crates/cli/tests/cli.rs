use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 3,
  "dataset": { "num_classes": 2, "instances_per_class": 4 },
  "backbone": { "layers": 1, "d": 8, "heads": 2 },
  "warmup": { "epochs": 1, "batch_size": 4 },
  "bank": { "num_entries": 6, "select_n": 2 },
  "train": { "epochs": 1, "batch_size": 8 }
}"#;

fn stylebank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylebank")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn select_n_above_num_entries_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "bank": { "num_entries": 2, "select_n": 3 } }"#);
    let out = dir.path().join("run");
    let o = stylebank(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_backbone_fails_at_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert!(stylebank(&["generate-data", "--config", &cfg, "--out", out]).status.success());
    let o = stylebank(&["train", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn grad_check_passes() {
    let o = stylebank(&["grad-check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn staged_and_full_runs_agree_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let full = |name: &str| {
        let out = dir.path().join(name);
        let o = stylebank(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("results.json")).unwrap()
    };
    let a = full("a");
    let b = full("b");
    assert_eq!(a, b);

    let staged = dir.path().join("staged");
    let s = staged.to_str().unwrap();
    for cmd in ["generate-data", "warmup", "train", "build-index", "evaluate"] {
        let o = stylebank(&[cmd, "--config", &cfg, "--out", s]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(staged.join("results.json")).unwrap(), a);

    let results: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for t in ["sketch2image", "art2image", "lowres2image", "text2image", "text+sketch2image"] {
        let r = &results["tasks"][t];
        assert!(r["r_at_1"].as_f64().unwrap() <= r["r_at_5"].as_f64().unwrap());
        assert!(r["num_queries"].as_u64().unwrap() > 0);
    }

    let o = stylebank(&["query", "--config", &cfg, "--out", s, "--style", "sketch", "--k", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let hits: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(hits["hits"].as_array().unwrap().len(), 3);
}
