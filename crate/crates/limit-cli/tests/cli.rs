//! End-to-end tests for the `limit` binary: every subcommand, the exit
//! code contract, config overrides, and the cold-checkpoint guard.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_limit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Tiny config: 12 classes in R^8, 6 base classes, two 2-way 2-shot
/// sessions, a one-hidden-layer model, and a few training steps.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = r#"{
  "dataset": {
    "source": "synth",
    "num_classes": 12,
    "dim": 8,
    "per_class": 12,
    "spread": 0.5,
    "csv_path": null,
    "split": {
      "base_class_count": 6,
      "way": 2,
      "shot": 2,
      "session_count": 2,
      "test_per_class": 4,
      "seed": 7
    }
  },
  "model": {
    "hidden_widths": [8],
    "embed_dim": 8,
    "calib_hidden": 8,
    "dropout_p": 0.5,
    "norm_before_dropout": false
  },
  "train": {
    "pretrain": { "lr": 0.05, "momentum": 0.9, "epochs": 3, "batch_size": 16 },
    "meta": {
      "lr": 0.01, "decay_factor": 0.5, "decay_every_iters": 100, "iterations": 3,
      "fake_task": { "fake_way": 2, "fake_shot": 2, "phases": 2, "query_shot": 2 }
    },
    "finetune": { "lr": 0.01, "steps": 3 },
    "kd_lambda": 0.5,
    "seed": 7
  }
}"#;
    let path = dir.join("cfg.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth",
        "--config",
        tmp.path().join("nope.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("config error"));
}

#[test]
fn invalid_config_field_fails_before_compute_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
        "--set",
        "train.pretrain.lr=-1.0",
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("learning rate"));
    assert!(!tmp.path().join("out").exists(), "no output before validation");
}

#[test]
fn synth_writes_feature_csv_and_label_map() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let outdir = tmp.path().join("out");
    let out = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("classes: 12"));
    assert!(stdout(&out).contains("instances: 144"));

    let csv = std::fs::read_to_string(outdir.join("features.csv")).unwrap();
    assert_eq!(csv.lines().count(), 144);
    let labels: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outdir.join("labels.json")).unwrap())
            .unwrap();
    assert_eq!(labels["schema_version"], 1);
    assert_eq!(labels["mapping"].as_object().unwrap().len(), 12);
}

#[test]
fn set_override_changes_the_dataset_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let outdir = tmp.path().join("out");
    let out = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--set",
        "dataset.num_classes=10",
        "--set",
        "dataset.per_class=5",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(outdir.join("features.csv")).unwrap();
    assert_eq!(csv.lines().count(), 50);
}

#[test]
fn pretrain_metatrain_eval_pipeline_produces_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let outdir = tmp.path().join("out");
    let c = cfg.to_str().unwrap();
    let o = outdir.to_str().unwrap();

    let out = run(&["pretrain", "--config", c, "--out", o]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt_path = outdir.join("pretrain_checkpoint.json");
    let ckpt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ckpt_path).unwrap()).unwrap();
    assert_eq!(ckpt["schema_version"], 1);
    assert_eq!(ckpt["seed"], 7);
    assert_eq!(ckpt["model"]["pretrained"], true);
    let log = std::fs::read_to_string(outdir.join("pretrain_log.csv")).unwrap();
    assert!(log.starts_with("iteration,lr,loss,accuracy\n"));
    assert_eq!(log.lines().count(), 4, "header plus one row per epoch");

    let out = run(&[
        "metatrain",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let meta_path = outdir.join("meta_checkpoint.json");
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
    assert_eq!(meta["model"]["meta_trained"], true);

    let out = run(&[
        "eval",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        meta_path.to_str().unwrap(),
        "--method",
        "limit",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outdir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["seed"], 7);
    assert_eq!(report["session_acc"].as_array().unwrap().len(), 3);
    assert_eq!(
        report["per_session_class_counts"],
        serde_json::json!([6, 8, 10])
    );

    let sessions = std::fs::read_to_string(outdir.join("sessions.csv")).unwrap();
    assert_eq!(sessions.lines().count(), 4, "header plus three sessions");
    let top5 = std::fs::read_to_string(outdir.join("top5.csv")).unwrap();
    let header = top5.lines().next().unwrap();
    assert_eq!(
        header,
        "instance,true_class,class1,prob1,class2,prob2,class3,prob3,class4,prob4,class5,prob5"
    );
    // final test set covers 10 classes with 4 held-out instances each
    assert_eq!(top5.lines().count(), 41);

    let confusion = std::fs::read_to_string(outdir.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 11, "header plus one row per class");
}

#[test]
fn eval_rejects_unknown_method() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        "whatever.json",
        "--method",
        "oracle",
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("unknown method"));
}

#[test]
fn metatrain_refuses_cold_checkpoint_without_allow_cold() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let outdir = tmp.path().join("out");
    let c = cfg.to_str().unwrap();
    let o = outdir.to_str().unwrap();

    // a zero-epoch pretrain leaves the checkpoint cold
    let out = run(&[
        "pretrain",
        "--config",
        c,
        "--out",
        o,
        "--set",
        "train.pretrain.epochs=0",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt_path = outdir.join("pretrain_checkpoint.json");
    let ckpt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ckpt_path).unwrap()).unwrap();
    assert_eq!(ckpt["model"]["pretrained"], false);

    let out = run(&[
        "metatrain",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("--allow-cold"));

    let out = run(&[
        "metatrain",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--allow-cold",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(outdir.join("meta_checkpoint.json").exists());
}

#[test]
fn divergent_training_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
        "--set",
        "train.pretrain.lr=1e300",
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn seed_flag_overrides_config_and_is_echoed_into_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let outdir = tmp.path().join("out");
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(outdir.join("pretrain_checkpoint.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(ckpt["seed"], 99);
}

#[test]
fn repeated_runs_write_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let o1 = tmp.path().join("a");
    let o2 = tmp.path().join("b");
    for o in [&o1, &o2] {
        let out = run(&["pretrain", "--config", c, "--out", o.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    let a = std::fs::read(o1.join("pretrain_checkpoint.json")).unwrap();
    let b = std::fs::read(o2.join("pretrain_checkpoint.json")).unwrap();
    assert_eq!(a, b, "checkpoints must be byte-identical");
}

#[test]
fn ablate_emits_five_rows_that_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let outdir = tmp.path().join("out");
    let out = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--trials",
        "2",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let table: limit_core::pipeline::AblationTable =
        serde_json::from_str(&std::fs::read_to_string(outdir.join("ablation.json")).unwrap())
            .unwrap();
    assert_eq!(table.schema_version, 1);
    assert_eq!(table.seeds, vec![7, 8]);
    assert_eq!(table.rows.len(), 5);
    for row in &table.rows {
        assert_eq!(row.session_acc.len(), 3);
        assert_eq!(row.final_acc_by_seed.len(), 2);
    }

    let csv = std::fs::read_to_string(outdir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "header plus five variants");
    assert!(csv.starts_with("variant,session_0,session_1,session_2,pd\n"));
}
