//! End-to-end runs: build data from config, train, evaluate, and the
//! five-variant ablation table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DataSource, RunConfig};
use crate::data::{
    generate_gaussian_mixture, load_feature_csv, split_sessions, DataError, Dataset, LabelMap,
    SessionStream,
};
use crate::eval::{run_incremental, EvalMethod, EvalOptions, EvalReport};
use crate::train::{
    meta_train, pretrain, train_calibration, ModelState, TrainError, TrainLogRow,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Which training/evaluation recipe to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Meta-trained embedding and calibration, prototype growth.
    Limit,
    /// Pretrained embedding, prototype growth, raw inner-product scoring.
    Proto,
    /// Per-session gradient finetuning.
    Finetune,
    /// Finetuning with knowledge distillation.
    Kd,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "limit" => Some(Method::Limit),
            "proto" => Some(Method::Proto),
            "finetune" => Some(Method::Finetune),
            "kd" => Some(Method::Kd),
            _ => None,
        }
    }
}

pub fn build_dataset(cfg: &RunConfig) -> Result<(Dataset, Option<LabelMap>), PipelineError> {
    match cfg.dataset.source {
        DataSource::Synth => Ok((
            generate_gaussian_mixture(
                cfg.dataset.num_classes,
                cfg.dataset.dim,
                cfg.dataset.per_class,
                cfg.dataset.spread,
                cfg.dataset.split.seed,
            ),
            None,
        )),
        DataSource::Csv => {
            let path = cfg.dataset.csv_path.as_ref().expect("validated");
            let (ds, map) = load_feature_csv(path)?;
            Ok((ds, Some(map)))
        }
    }
}

pub fn build_stream(cfg: &RunConfig) -> Result<(SessionStream, Option<LabelMap>), PipelineError> {
    let (ds, map) = build_dataset(cfg)?;
    Ok((split_sessions(&ds, &cfg.dataset.split)?, map))
}

/// Fresh model sized for the stream's base session.
pub fn init_state(cfg: &RunConfig, stream: &SessionStream, seed: u64) -> ModelState {
    let mut rng = crate::rng_from_seed(seed);
    ModelState::init(
        &cfg.embed_widths(stream.base.dim()),
        stream.class_sets[0].clone(),
        cfg.model.calib_hidden,
        cfg.model.dropout_p,
        &mut rng,
    )
}

pub struct MethodRun {
    pub state: ModelState,
    pub report: EvalReport,
    pub pretrain_log: Vec<TrainLogRow>,
    pub meta_log: Vec<TrainLogRow>,
}

/// Train from scratch with `method`'s recipe and run the incremental
/// protocol. `seed` drives init, training, and session-time updates.
pub fn run_method(
    cfg: &RunConfig,
    method: Method,
    seed: u64,
) -> Result<MethodRun, PipelineError> {
    let (stream, _) = build_stream(cfg)?;
    let mut state = init_state(cfg, &stream, seed);
    state.calib.norm_before_dropout = cfg.model.norm_before_dropout;
    let mut rng = crate::rng_from_seed(seed.wrapping_add(1));
    let pretrain_log = pretrain(&mut state, &stream.base, &cfg.train, &mut rng)?;

    let mut meta_log = Vec::new();
    let eval_method = match method {
        Method::Limit => {
            meta_log = meta_train(&mut state, &stream.base, &cfg.train, &mut rng)?;
            EvalMethod::Prototype { calibrated: true }
        }
        Method::Proto => EvalMethod::Prototype { calibrated: false },
        Method::Finetune => EvalMethod::Finetune,
        Method::Kd => EvalMethod::Kd,
    };
    let opts = EvalOptions {
        method: eval_method,
        train: cfg.train.clone(),
    };
    let report = run_incremental(&state, &stream, &opts, seed)?;
    Ok(MethodRun {
        state,
        report,
        pretrain_log,
        meta_log,
    })
}

/// `iteration,lr,loss,accuracy` rows for the training-log CSV.
pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("iteration,lr,loss,accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iteration, r.lr, r.loss, r.accuracy));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// No incremental mechanism at all: per-session finetuning.
    Finetune,
    /// Prototype growth on the pretrained embedding, raw scoring.
    Prototype,
    /// Prototype growth plus calibration trained without fake tasks.
    PrototypeCalibrated,
    /// Meta-training with single-phase fake tasks.
    MetaOnePhase,
    /// Meta-training with the full multi-phase fake tasks.
    MetaMultiPhase,
}

pub const ABLATION_ORDER: [AblationVariant; 5] = [
    AblationVariant::Finetune,
    AblationVariant::Prototype,
    AblationVariant::PrototypeCalibrated,
    AblationVariant::MetaOnePhase,
    AblationVariant::MetaMultiPhase,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// Mean accuracy per session across trials.
    pub session_acc: Vec<f64>,
    /// Mean performance drop across trials.
    pub pd: f64,
    /// Mean final-session base-class (old-class) accuracy across trials.
    pub base_acc: f64,
    /// Per-trial final-session accuracies.
    pub final_acc_by_seed: Vec<f64>,
}

impl AblationRow {
    pub fn mean_final_acc(&self) -> f64 {
        *self.session_acc.last().expect("at least one session")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn csv(&self) -> String {
        let sessions = self.rows[0].session_acc.len();
        let mut s = String::from("variant");
        for i in 0..sessions {
            s.push_str(&format!(",session_{i}"));
        }
        s.push_str(",pd\n");
        for r in &self.rows {
            s.push_str(&format!("{}", variant_name(r.variant)));
            for a in &r.session_acc {
                s.push_str(&format!(",{a}"));
            }
            s.push_str(&format!(",{}\n", r.pd));
        }
        s
    }
}

pub fn variant_name(v: AblationVariant) -> &'static str {
    match v {
        AblationVariant::Finetune => "finetune",
        AblationVariant::Prototype => "prototype",
        AblationVariant::PrototypeCalibrated => "prototype_calibrated",
        AblationVariant::MetaOnePhase => "meta_one_phase",
        AblationVariant::MetaMultiPhase => "meta_multi_phase",
    }
}

/// Run all five variants over the given seeds. Each seed draws its own
/// data split and initialization; the pretrained model is shared across
/// variants within a seed so differences come from the mechanism under
/// test, not pretraining noise.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64]) -> Result<AblationTable, PipelineError> {
    assert!(!seeds.is_empty());
    let sessions = cfg.dataset.split.session_count + 1;
    let mut acc: Vec<Vec<Vec<f64>>> = vec![Vec::new(); ABLATION_ORDER.len()]; // [variant][trial][session]
    let mut pds: Vec<Vec<f64>> = vec![Vec::new(); ABLATION_ORDER.len()];
    let mut base_accs: Vec<Vec<f64>> = vec![Vec::new(); ABLATION_ORDER.len()];

    for &seed in seeds {
        let mut cfg = cfg.clone();
        cfg.dataset.split.seed = seed;
        let (stream, _) = build_stream(&cfg)?;
        let mut base_state = init_state(&cfg, &stream, seed);
        base_state.calib.norm_before_dropout = cfg.model.norm_before_dropout;
        let mut rng = crate::rng_from_seed(seed.wrapping_add(1));
        pretrain(&mut base_state, &stream.base, &cfg.train, &mut rng)?;

        for (vi, &variant) in ABLATION_ORDER.iter().enumerate() {
            let mut state = base_state.clone();
            let mut vrng = crate::rng_from_seed(seed.wrapping_add(2 + vi as u64));
            let method = match variant {
                AblationVariant::Finetune => EvalMethod::Finetune,
                AblationVariant::Prototype => EvalMethod::Prototype { calibrated: false },
                AblationVariant::PrototypeCalibrated => {
                    train_calibration(&mut state, &stream.base, &cfg.train, &mut vrng)?;
                    EvalMethod::Prototype { calibrated: true }
                }
                AblationVariant::MetaOnePhase => {
                    let mut c = cfg.train.clone();
                    let total = c.meta.fake_task.phases * c.meta.fake_task.fake_way;
                    c.meta.fake_task.phases = 1;
                    c.meta.fake_task.fake_way = total;
                    meta_train(&mut state, &stream.base, &c, &mut vrng)?;
                    EvalMethod::Prototype { calibrated: true }
                }
                AblationVariant::MetaMultiPhase => {
                    meta_train(&mut state, &stream.base, &cfg.train, &mut vrng)?;
                    EvalMethod::Prototype { calibrated: true }
                }
            };
            let opts = EvalOptions {
                method,
                train: cfg.train.clone(),
            };
            let report = run_incremental(&state, &stream, &opts, seed)?;
            assert_eq!(report.session_acc.len(), sessions);
            acc[vi].push(report.session_acc.clone());
            pds[vi].push(report.pd);
            base_accs[vi].push(report.base_acc);
        }
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let rows = ABLATION_ORDER
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let session_acc: Vec<f64> = (0..sessions)
                .map(|s| mean(&acc[vi].iter().map(|t| t[s]).collect::<Vec<_>>()))
                .collect();
            AblationRow {
                variant,
                pd: mean(&pds[vi]),
                base_acc: mean(&base_accs[vi]),
                final_acc_by_seed: acc[vi].iter().map(|t| *t.last().unwrap()).collect(),
                session_acc,
            }
        })
        .collect();
    Ok(AblationTable {
        schema_version: crate::SCHEMA_VERSION,
        seeds: seeds.to_vec(),
        rows,
    })
}
