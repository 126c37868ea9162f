//! Incremental evaluation protocol: per-session accuracy on cumulative
//! test sets, performance drop, base/incremental split accuracies, and
//! confusion matrices.

use serde::{Deserialize, Serialize};

use crate::calib::{calibrate, calibrated_logits, Mode};
use crate::data::SessionStream;
use crate::model::{augment_classifier, compute_prototypes, raw_logits};
use crate::tensor::Tape;
use crate::train::{finetune_incremental, ModelState, TrainConfig, TrainError};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in percent.
pub fn top1_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * correct as f64 / truth.len() as f64
}

/// `confusion[i][j]` counts instances of `classes[i]` predicted as
/// `classes[j]`.
pub fn confusion_matrix(
    predicted: &[usize],
    truth: &[usize],
    classes: &[usize],
) -> Vec<Vec<usize>> {
    let pos = |c: usize| classes.iter().position(|&x| x == c).expect("known class");
    let mut m = vec![vec![0usize; classes.len()]; classes.len()];
    for (&p, &t) in predicted.iter().zip(truth) {
        m[pos(t)][pos(p)] += 1;
    }
    m
}

/// Accuracy drop from the first to the last session.
pub fn performance_drop(first: f64, last: f64) -> f64 {
    first - last
}

/// Harmonic mean of two accuracies; zero if either is zero.
pub fn harmonic_mean(base: f64, inc: f64) -> f64 {
    if base <= 0.0 || inc <= 0.0 {
        0.0
    } else {
        2.0 * base * inc / (base + inc)
    }
}

/// Macro-averaged per-class accuracy over a subset of the class order,
/// read off the confusion matrix.
pub fn macro_accuracy(confusion: &[Vec<usize>], positions: &[usize]) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &i in positions {
        let total: usize = confusion[i].iter().sum();
        if total > 0 {
            sum += 100.0 * confusion[i][i] as f64 / total as f64;
        }
    }
    sum / positions.len() as f64
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// How the incremental sessions update the model during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    /// Grow the classifier with class prototypes, optionally scoring
    /// through the calibration transformer.
    Prototype { calibrated: bool },
    /// Gradient finetuning on each session (catastrophic forgetting).
    Finetune,
    /// Finetuning with knowledge distillation against the frozen model.
    Kd,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub method: EvalMethod,
    pub train: TrainConfig,
}

/// Everything the protocol measures, rounded to two decimals.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub method: EvalMethod,
    /// Top-1 accuracy on the cumulative test set after each session.
    pub session_acc: Vec<f64>,
    pub pd: f64,
    pub base_acc: f64,
    pub inc_acc: f64,
    pub harmonic: f64,
    /// Class ids in final classifier order; indexes the confusion matrix.
    pub class_order: Vec<usize>,
    /// Final-session confusion matrix, rows true and columns predicted.
    pub confusion: Vec<Vec<usize>>,
    /// Number of classes evaluated at each session.
    pub per_session_class_counts: Vec<usize>,
}

impl EvalReport {
    /// `session,accuracy` rows.
    pub fn session_csv(&self) -> String {
        let mut s = String::from("session,accuracy\n");
        for (i, a) in self.session_acc.iter().enumerate() {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }

    /// Confusion matrix with class-id header and row labels.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in &self.class_order {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&format!("{}", self.class_order[i]));
            for n in row {
                s.push_str(&format!(",{n}"));
            }
            s.push('\n');
        }
        s
    }
}

fn eval_threads() -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("LIMIT_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => hw.min(n),
        _ => hw,
    }
}

fn logits_chunk(
    state: &ModelState,
    features: &crate::tensor::Tensor,
    calibrated: bool,
) -> Result<crate::tensor::Tensor, TrainError> {
    let emb = state.embed.embed(features)?;
    let logits = if calibrated {
        let mut tape = Tape::new();
        let w = tape.constant(state.classifier.weight.clone());
        let e = tape.constant(emb);
        let cvars = state.calib.vars(&mut tape, false);
        // eval mode skips dropout, so this rng is never consulted
        let mut rng = crate::rng_from_seed(0);
        let cal = calibrate(&mut tape, &cvars, &state.calib, w, e, Mode::Eval, &mut rng)?;
        let out = calibrated_logits(&mut tape, &cal)?;
        tape.value(out).clone()
    } else {
        raw_logits(&state.classifier, &emb)?
    };
    Ok(logits)
}

fn predict_chunk(
    state: &ModelState,
    features: &crate::tensor::Tensor,
    calibrated: bool,
) -> Result<Vec<usize>, TrainError> {
    let logits = logits_chunk(state, features, calibrated)?;
    Ok((0..logits.rows())
        .map(|i| state.classifier.class_ids[argmax_row(logits.row(i))])
        .collect())
}

/// Per-instance class logits for every row of `ds`, in dataset order.
pub fn predict_logits(
    state: &ModelState,
    ds: &crate::data::Dataset,
    calibrated: bool,
) -> Result<crate::tensor::Tensor, TrainError> {
    logits_chunk(state, &ds.features, calibrated)
}

/// Softmax over one logit row.
pub fn softmax_probs(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// The `k` most probable classes for one logit row, highest first.
/// Ties break toward the lower class position for determinism.
pub fn top_k_classes(row: &[f64], class_ids: &[usize], k: usize) -> Vec<(usize, f64)> {
    let probs = softmax_probs(row);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| (class_ids[i], probs[i]))
        .collect()
}

/// Predicted class ids for every row, split across threads (capped by
/// `LIMIT_NUM_THREADS`) with deterministic in-order reassembly.
pub fn predict(
    state: &ModelState,
    ds: &crate::data::Dataset,
    calibrated: bool,
) -> Result<Vec<usize>, TrainError> {
    let n = ds.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let threads = eval_threads().min(n);
    if threads == 1 {
        return predict_chunk(state, &ds.features, calibrated);
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Result<Vec<usize>, TrainError>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for start in (0..n).step_by(chunk) {
            let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let sub = ds.subset(&rows);
            handles.push(scope.spawn(move || predict_chunk(state, &sub.features, calibrated)));
        }
        out = handles.into_iter().map(|h| h.join().unwrap()).collect();
    });
    let mut preds = Vec::with_capacity(n);
    for r in out {
        preds.extend(r?);
    }
    Ok(preds)
}

/// Run the full incremental protocol over a session stream. The input
/// state is never mutated; per-session updates happen on a clone.
pub fn run_incremental(
    state: &ModelState,
    stream: &SessionStream,
    opts: &EvalOptions,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    run_incremental_full(state, stream, opts, seed).map(|(report, _)| report)
}

/// Like [`run_incremental`] but also returns the post-protocol model
/// (classifier grown or finetuned through every session), so callers
/// can inspect final-session predictions.
pub fn run_incremental_full(
    state: &ModelState,
    stream: &SessionStream,
    opts: &EvalOptions,
    seed: u64,
) -> Result<(EvalReport, ModelState), TrainError> {
    let mut model = state.clone();
    let calibrated = matches!(
        opts.method,
        EvalMethod::Prototype { calibrated: true }
    );
    let mut rng = crate::rng_from_seed(seed);

    let mut session_acc = Vec::with_capacity(stream.test_sets.len());
    let mut class_counts = Vec::with_capacity(stream.test_sets.len());
    let mut last_preds = Vec::new();

    for b in 0..stream.test_sets.len() {
        if b > 0 {
            let session = &stream.sessions[b - 1];
            let new_classes = &stream.class_sets[b];
            match opts.method {
                EvalMethod::Prototype { .. } => {
                    let protos = compute_prototypes(session, &model.embed)?;
                    model.classifier =
                        augment_classifier(&model.classifier, &protos, new_classes)?;
                }
                EvalMethod::Finetune => {
                    finetune_incremental(
                        &mut model, session, new_classes, &opts.train, 0.0, &mut rng,
                    )?;
                }
                EvalMethod::Kd => {
                    finetune_incremental(
                        &mut model,
                        session,
                        new_classes,
                        &opts.train,
                        opts.train.kd_lambda,
                        &mut rng,
                    )?;
                }
            }
        }
        let test = &stream.test_sets[b];
        let preds = predict(&model, test, calibrated)?;
        session_acc.push(round2(top1_accuracy(&preds, &test.labels)));
        class_counts.push(model.classifier.num_classes());
        if b == stream.test_sets.len() - 1 {
            last_preds = preds;
        }
    }

    let class_order = model.classifier.class_ids.clone();
    let final_test = stream.test_sets.last().expect("at least the base test set");
    let confusion = confusion_matrix(&last_preds, &final_test.labels, &class_order);
    let base_positions: Vec<usize> = stream.class_sets[0]
        .iter()
        .map(|c| model.classifier.position_of(*c).expect("base class"))
        .collect();
    let inc_positions: Vec<usize> = (0..class_order.len())
        .filter(|i| !base_positions.contains(i))
        .collect();
    let base_acc = round2(macro_accuracy(&confusion, &base_positions));
    let inc_acc = if inc_positions.is_empty() {
        0.0
    } else {
        round2(macro_accuracy(&confusion, &inc_positions))
    };

    let report = EvalReport {
        schema_version: crate::SCHEMA_VERSION,
        seed,
        method: opts.method,
        pd: round2(performance_drop(session_acc[0], *session_acc.last().unwrap())),
        harmonic: round2(harmonic_mean(base_acc, inc_acc)),
        session_acc,
        base_acc,
        inc_acc,
        class_order,
        confusion,
        per_session_class_counts: class_counts,
    };
    Ok((report, model))
}
