//! Command-line front end for the incremental-learning pipeline.
//!
//! Subcommands mirror the pipeline stages: `synth` materializes the
//! synthetic dataset, `pretrain` and `metatrain` produce checkpoints,
//! `eval` runs the incremental protocol from a checkpoint, and `ablate`
//! sweeps the method variants over several seeds.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric
//! divergence during training, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use limit_core::checkpoint::{Checkpoint, CheckpointError};
use limit_core::config::{ConfigError, DataSource, RunConfig};
use limit_core::data::{save_feature_csv, LabelMap};
use limit_core::eval::{run_incremental_full, predict_logits, top_k_classes, EvalMethod, EvalOptions};
use limit_core::pipeline::{
    build_dataset, build_stream, init_state, run_ablation, train_log_csv, Method, PipelineError,
};
use limit_core::train::{meta_train, pretrain, TrainError};

#[derive(Parser)]
#[command(name = "limit", version, about = "Few-shot class-incremental learning pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's dataset and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config overrides, e.g. --set train.meta.iterations=500
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset as a feature CSV plus label map.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on the base session; writes a checkpoint and a log CSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train on fake incremental tasks starting from a pretrained
    /// checkpoint; writes a checkpoint and a log CSV.
    Metatrain {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Proceed even if the checkpoint was never pretrained.
        #[arg(long)]
        allow_cold: bool,
    },
    /// Run the incremental protocol from a checkpoint and write reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Session-update rule: limit, proto, finetune, or kd.
        #[arg(long, default_value = "limit")]
        method: String,
    },
    /// Run the five-variant ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds (base seed, base seed + 1, ...).
        #[arg(long, default_value_t = 5)]
        trials: u64,
    },
}

enum CliError {
    /// Bad configuration or input artifact; exit code 2.
    Config(String),
    /// Loss became non-finite during training; exit code 3.
    Divergence(String),
    /// Everything else; exit code 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Divergence(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(format!("config error: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::Runtime(format!("checkpoint i/o error: {io}")),
            other => CliError::Config(format!("checkpoint error: {other}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { iteration } => CliError::Divergence(format!(
                "training diverged: non-finite loss at iteration {iteration}"
            )),
            TrainError::BadConfig(m) => CliError::Config(format!("config error: {m}")),
            other => CliError::Runtime(format!("training error: {other}")),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Train(t) => t.into(),
            PipelineError::Data(d) => CliError::Config(format!("dataset error: {d}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth { common } => cmd_synth(&common),
        Cmd::Pretrain { common } => cmd_pretrain(&common),
        Cmd::Metatrain {
            common,
            checkpoint,
            allow_cold,
        } => cmd_metatrain(&common, &checkpoint, allow_cold),
        Cmd::Eval {
            common,
            checkpoint,
            method,
        } => cmd_eval(&common, &checkpoint, &method),
        Cmd::Ablate { common, trials } => cmd_ablate(&common, trials),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Load the config with overrides applied, then fold in --seed.
fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_with_overrides(&common.config, &common.set)?;
    if let Some(seed) = common.seed {
        cfg.dataset.split.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn pretty_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialization error: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn cmd_synth(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    if !matches!(cfg.dataset.source, DataSource::Synth) {
        return Err(CliError::Config(
            "config error: dataset.source must be \"synth\" for the synth command".into(),
        ));
    }
    let (ds, _) = build_dataset(&cfg)?;

    std::fs::create_dir_all(&common.out)?;
    let csv_path = common.out.join("features.csv");
    save_feature_csv(&ds, &csv_path)
        .map_err(|e| CliError::Runtime(format!("csv write error: {e}")))?;

    // synthetic labels are already dense, so the map is the identity
    let map = LabelMap {
        schema_version: limit_core::SCHEMA_VERSION,
        mapping: (0..cfg.dataset.num_classes)
            .map(|c| (c as i64, c))
            .collect(),
    };
    write_file(&common.out, "labels.json", &pretty_json(&map)?)?;

    let by_class = ds.indices_by_class();
    println!("classes: {}", by_class.len());
    println!("instances: {} ({} per class)", ds.len(), cfg.dataset.per_class);
    println!("feature dim: {}", ds.dim());
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_pretrain(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let (stream, _) = build_stream(&cfg)?;
    let seed = cfg.train.seed;
    let mut state = init_state(&cfg, &stream, seed);
    state.calib.norm_before_dropout = cfg.model.norm_before_dropout;
    let mut rng = limit_core::rng_from_seed(seed.wrapping_add(1));
    let log = pretrain(&mut state, &stream.base, &cfg.train, &mut rng)?;

    let ckpt = Checkpoint::new(seed, state);
    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("pretrain_checkpoint.json");
    ckpt.save(&ckpt_path)?;
    write_file(&common.out, "pretrain_log.csv", &train_log_csv(&log))?;

    if let Some(last) = log.last() {
        println!(
            "pretrained {} epochs, final loss {:.4}, accuracy {:.2}%",
            cfg.train.pretrain.epochs, last.loss, last.accuracy
        );
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_metatrain(common: &Common, checkpoint: &Path, allow_cold: bool) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if !ckpt.model.pretrained && !allow_cold {
        return Err(CliError::Config(format!(
            "checkpoint {} was never pretrained; pass --allow-cold to meta-train anyway",
            checkpoint.display()
        )));
    }
    let (stream, _) = build_stream(&cfg)?;
    let seed = cfg.train.seed;
    let mut state = ckpt.model;
    let mut rng = limit_core::rng_from_seed(seed.wrapping_add(1));
    let log = meta_train(&mut state, &stream.base, &cfg.train, &mut rng)?;

    let out_ckpt = Checkpoint::new(seed, state);
    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("meta_checkpoint.json");
    out_ckpt.save(&ckpt_path)?;
    write_file(&common.out, "meta_log.csv", &train_log_csv(&log))?;

    if let Some(last) = log.last() {
        println!(
            "meta-trained {} iterations, final loss {:.4}, fake-query accuracy {:.2}%",
            cfg.train.meta.iterations, last.loss, last.accuracy
        );
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, method: &str) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let method = Method::parse(method).ok_or_else(|| {
        CliError::Config(format!(
            "config error: unknown method {method:?} (expected limit, proto, finetune, or kd)"
        ))
    })?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (stream, map) = build_stream(&cfg)?;
    let seed = cfg.train.seed;

    let eval_method = match method {
        Method::Limit => EvalMethod::Prototype { calibrated: true },
        Method::Proto => EvalMethod::Prototype { calibrated: false },
        Method::Finetune => EvalMethod::Finetune,
        Method::Kd => EvalMethod::Kd,
    };
    let opts = EvalOptions {
        method: eval_method,
        train: cfg.train.clone(),
    };
    let (report, final_model) = run_incremental_full(&ckpt.model, &stream, &opts, seed)?;

    std::fs::create_dir_all(&common.out)?;
    write_file(&common.out, "report.json", &pretty_json(&report)?)?;
    write_file(&common.out, "sessions.csv", &report.session_csv())?;
    write_file(&common.out, "confusion.csv", &report.confusion_csv())?;
    if let Some(map) = map {
        write_file(&common.out, "labels.json", &pretty_json(&map)?)?;
    }

    // per-instance top-5 class probabilities on the final test set, the
    // raw data behind any probability-bar style figure
    let calibrated = matches!(eval_method, EvalMethod::Prototype { calibrated: true });
    let final_test = stream.test_sets.last().expect("at least the base test set");
    let logits = predict_logits(&final_model, final_test, calibrated)?;
    let k = 5.min(final_model.classifier.num_classes());
    let mut top5 = String::from("instance,true_class");
    for i in 1..=k {
        top5.push_str(&format!(",class{i},prob{i}"));
    }
    top5.push('\n');
    for i in 0..final_test.len() {
        top5.push_str(&format!("{},{}", i, final_test.labels[i]));
        for (c, p) in top_k_classes(logits.row(i), &final_model.classifier.class_ids, k) {
            top5.push_str(&format!(",{c},{p}"));
        }
        top5.push('\n');
    }
    write_file(&common.out, "top5.csv", &top5)?;

    println!(
        "session accuracy: {:?}",
        report.session_acc
    );
    println!(
        "pd {:.2}, base {:.2}, incremental {:.2}, harmonic {:.2}",
        report.pd, report.base_acc, report.inc_acc, report.harmonic
    );
    println!("wrote {}", common.out.join("report.json").display());
    Ok(())
}

fn cmd_ablate(common: &Common, trials: u64) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Config("config error: --trials must be >= 1".into()));
    }
    let cfg = load_config(common)?;
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..trials).map(|i| base.wrapping_add(i)).collect();
    let table = run_ablation(&cfg, &seeds)?;

    std::fs::create_dir_all(&common.out)?;
    write_file(&common.out, "ablation.json", &pretty_json(&table)?)?;
    write_file(&common.out, "ablation.csv", &table.csv())?;

    for row in &table.rows {
        println!(
            "{}: final {:.2}, pd {:.2}",
            limit_core::pipeline::variant_name(row.variant),
            row.mean_final_acc(),
            row.pd
        );
    }
    println!("wrote {}", common.out.join("ablation.json").display());
    Ok(())
}
