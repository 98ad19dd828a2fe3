use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 5,
  "data": { "n_items": 24, "n_pairs_train": 16, "n_pairs_test": 16 },
  "model": {
    "image_side": 32, "d_model": 8, "layers": 1, "heads": 2, "d_ff": 16,
    "embedder_channels": [4], "decoder_channels": [4]
  },
  "pretrain": { "steps": 4, "batch_size": 4, "micro_batch": 2 },
  "finetune": { "steps": 3, "batch_size": 4, "micro_batch": 2 },
  "probe": { "n_eval": 6 },
  "ablation": { "seeds": [0] }
}"#;

fn mlim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlim"))
        .args(args)
        .env_remove("MLIM_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

/// Runs a subcommand that must succeed and returns its run directory.
fn run_ok(args: &[&str]) -> PathBuf {
    let out = mlim(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_1_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/c.json");
    let out = mlim(&["gen-data", "--config", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn invalid_configs_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"seed": 1, "colour": 3}"#,
        r#"{"model": {"d_model": 10, "heads": 4}}"#,
        r#"{"pretrain": {"batch_size": 6, "micro_batch": 4}}"#,
        r#"{"seed": "#,
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.json"));
        fs::write(&path, text).unwrap();
        let out = mlim(&["pretrain", "--config", s(&path), "--out", s(tmp.path())]);
        assert_eq!(out.status.code(), Some(1), "{text}");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    }
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(mlim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mlim(&["pretrain", "--seed", "minus-one"]).status.code(), Some(1));
    assert_eq!(mlim(&["--help"]).status.code(), Some(0));
}

#[test]
fn probe_without_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = mlim(&["probe", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreadable_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let bogus = tmp.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    for ckpt in [bogus, tmp.path().join("absent.ckpt")] {
        let out = mlim(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(tmp.path())]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains(s(&ckpt)));
    }
}

#[test]
fn gen_data_twice_gives_identical_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = run_ok(&["gen-data", "--config", s(&cfg), "--out", s(tmp.path())]);
    let b = run_ok(&["gen-data", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_ne!(a, b);
    let names = files(&a);
    assert_eq!(names, files(&b));
    for required in ["config.json", "manifest.jsonl", "pairs_test.jsonl", "pairs_train.jsonl", "item_000023.ppm"] {
        assert!(names.iter().any(|n| n == required), "{required} missing");
    }
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn seed_flag_overrides_environment_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mlim"));
        c.args(["gen-data", "--config", s(&cfg), "--out", s(tmp.path())]).env("RUST_LOG", "warn");
        match env {
            Some(v) => c.env("MLIM_SEED", v),
            None => c.env_remove("MLIM_SEED"),
        };
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        let out = c.output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        let dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
        let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
        echo["seed"].as_u64().unwrap()
    };
    assert_eq!(run(None, None), 5);
    assert_eq!(run(Some("11"), None), 11);
    assert_eq!(run(Some("11"), Some("12")), 12);
    let mut c = Command::new(env!("CARGO_BIN_EXE_mlim"));
    let out = c.args(["gen-data", "--config", s(&cfg), "--out", s(tmp.path())]).env("MLIM_SEED", "x").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_then_probe_produces_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let pre = run_ok(&["pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    let log = fs::read_to_string(pre.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,mode,mlm_loss,recon_loss,total"));
    // one row per micro-batch
    assert_eq!(lines.count(), 4 * 2);
    let ckpt = pre.join("pretrained.ckpt");
    let probe = run_ok(&["probe", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(tmp.path())]);
    let names = files(&probe);
    for task in ["mlm", "recon"] {
        let conds: &[&str] = if task == "mlm" {
            &["original", "gray_image", "random_image"]
        } else {
            &["original", "empty_text", "random_text"]
        };
        for c in conds {
            for ext in ["csv", "svg"] {
                let name = format!("probe_{task}_{c}.{ext}");
                assert!(names.contains(&name), "{name} missing from {names:?}");
            }
        }
    }
    let csv = fs::read_to_string(probe.join("probe_recon_original.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("mask_prob,mean,std,n"));
    assert_eq!(csv.lines().count(), 1 + 4);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(probe.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["checkpoint"], s(&ckpt));
}

#[test]
fn config_echo_replays_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = run_ok(&["pretrain", "--config", s(&cfg), "--seed", "9", "--out", s(tmp.path())]);
    let echo = first.join("config.json");
    let second = run_ok(&["pretrain", "--config", s(&echo), "--out", s(tmp.path())]);
    for f in ["config.json", "train_log.csv", "pretrained.ckpt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn finetune_writes_metrics_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let pre = run_ok(&["pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    let ft = run_ok(&["finetune", "--config", s(&cfg), "--checkpoint", s(&pre.join("pretrained.ckpt")), "--out", s(tmp.path())]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("metrics.json")).unwrap()).unwrap();
    let auc = metrics["pr_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(metrics["n_test"], 16);
    let log = fs::read_to_string(ft.join("finetune_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,mode,loss"));
    assert_eq!(log.lines().count(), 1 + 3 * 2);
    assert!(ft.join("finetuned.ckpt").exists());
}

#[test]
fn pretrain_reads_a_generated_corpus_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = run_ok(&["gen-data", "--config", s(&cfg), "--out", s(tmp.path())]);
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["data"]["corpus_dir"] = s(&data).into();
    let on_disk = tmp.path().join("disk.json");
    fs::write(&on_disk, v.to_string()).unwrap();
    let a = run_ok(&["pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    let b = run_ok(&["pretrain", "--config", s(&on_disk), "--out", s(tmp.path())]);
    assert_eq!(fs::read(a.join("train_log.csv")).unwrap(), fs::read(b.join("train_log.csv")).unwrap());
}

#[test]
fn ablate_then_report_rerenders_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let abl = run_ok(&["ablate", "--config", s(&cfg), "--out", s(tmp.path())]);
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variant,seeds,pr_auc,kind"));
    assert_eq!(csv.lines().count(), 1 + 6 + 6);
    let results: serde_json::Value = serde_json::from_str(&fs::read_to_string(abl.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(results["fair"], true);
    let rep = run_ok(&["report", "--from", s(&abl), "--out", s(tmp.path())]);
    assert_eq!(fs::read(abl.join("ablation.csv")).unwrap(), fs::read(rep.join("ablation.csv")).unwrap());
}

#[test]
fn report_without_results_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mlim(&["report", "--from", s(tmp.path()), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_never_touch_earlier_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = run_ok(&["pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    let before = fs::read(a.join("pretrained.ckpt")).unwrap();
    let b = run_ok(&["pretrain", "--config", s(&cfg), "--seed", "77", "--out", s(tmp.path())]);
    assert_ne!(a, b);
    assert_eq!(fs::read(a.join("pretrained.ckpt")).unwrap(), before);
    assert!(a.file_name().unwrap().to_str().unwrap().starts_with("pretrain-"));
}
