//! Python bindings for the incremental-learning pipeline: dataset
//! synthesis and splitting, the pretrain / meta-train / evaluate stages,
//! the ablation grid, and the headline metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use limit_core::config::RunConfig;
use limit_core::eval::{EvalMethod, EvalOptions, EvalReport};
use limit_core::pipeline::{self, Method};
use limit_core::train::{self, TrainLogRow};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// `(iteration, lr, loss, accuracy)` tuples for Python consumption.
fn log_tuples(rows: &[TrainLogRow]) -> Vec<(usize, f64, f64, f64)> {
    rows.iter()
        .map(|r| (r.iteration, r.lr, r.loss, r.accuracy))
        .collect()
}

fn parse_method(s: &str) -> PyResult<Method> {
    Method::parse(s).ok_or_else(|| {
        value_err(format!(
            "unknown method {s:?} (expected limit, proto, finetune, or kd)"
        ))
    })
}

/// Labeled feature matrix.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: limit_core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Gaussian mixture with `num_classes` classes in R^dim.
    #[staticmethod]
    pub fn synth(
        num_classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
    ) -> Self {
        PyDataset {
            inner: limit_core::data::generate_gaussian_mixture(
                num_classes,
                dim,
                per_class,
                spread,
                seed,
            ),
        }
    }

    /// Load `label,f1,...,fD` rows; returns the dataset and the map from
    /// original labels to the dense 0-based labels used internally.
    #[staticmethod]
    pub fn from_csv(path: PathBuf) -> PyResult<(Self, BTreeMap<i64, usize>)> {
        let (ds, map) = limit_core::data::load_feature_csv(&path).map_err(value_err)?;
        Ok((PyDataset { inner: ds }, map.mapping))
    }

    pub fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        limit_core::data::save_feature_csv(&self.inner, &path).map_err(runtime_err)
    }

    pub fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    pub fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    /// Feature matrix as a list of rows.
    #[getter]
    pub fn features(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len())
            .map(|i| self.inner.features.row(i).to_vec())
            .collect()
    }

    /// Instance count per class id.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.inner
            .indices_by_class()
            .into_iter()
            .map(|(c, idx)| (c, idx.len()))
            .collect()
    }

    pub fn __repr__(&self) -> String {
        format!(
            "Dataset(instances={}, dim={}, classes={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.indices_by_class().len()
        )
    }
}

/// Base session, incremental sessions, and cumulative test sets.
#[pyclass(name = "SessionStream", skip_from_py_object)]
#[derive(Clone)]
pub struct PySessionStream {
    inner: limit_core::data::SessionStream,
}

#[pymethods]
impl PySessionStream {
    #[getter]
    pub fn num_sessions(&self) -> usize {
        self.inner.num_sessions()
    }

    /// Class ids introduced at each session; index 0 is the base set.
    #[getter]
    pub fn class_sets(&self) -> Vec<Vec<usize>> {
        self.inner.class_sets.clone()
    }

    pub fn base(&self) -> PyDataset {
        PyDataset {
            inner: self.inner.base.clone(),
        }
    }

    /// Training data for incremental session `i` (0-based).
    pub fn session(&self, i: usize) -> PyResult<PyDataset> {
        self.inner
            .sessions
            .get(i)
            .map(|d| PyDataset { inner: d.clone() })
            .ok_or_else(|| value_err(format!("session index {i} out of range")))
    }

    /// Cumulative test set after session `i` (0 = base only).
    pub fn test_set(&self, i: usize) -> PyResult<PyDataset> {
        self.inner
            .test_sets
            .get(i)
            .map(|d| PyDataset { inner: d.clone() })
            .ok_or_else(|| value_err(format!("test set index {i} out of range")))
    }

    pub fn __repr__(&self) -> String {
        format!(
            "SessionStream(base_classes={}, sessions={})",
            self.inner.class_sets[0].len(),
            self.inner.num_sessions()
        )
    }
}

/// Full run configuration: dataset, model, and training sections.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Desk-scale reference configuration.
    #[staticmethod]
    pub fn example() -> Self {
        PyConfig {
            inner: limit_core::config::example_config(),
        }
    }

    #[staticmethod]
    pub fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::from_json(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    pub fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::load(&path).map_err(value_err)?,
        })
    }

    pub fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(runtime_err)
    }

    /// Apply a dotted-path override like `"train.meta.iterations=50"`.
    pub fn set(&mut self, spec: &str) -> PyResult<()> {
        let mut tree = serde_json::to_value(&self.inner).map_err(runtime_err)?;
        limit_core::config::apply_override(&mut tree, spec).map_err(value_err)?;
        let cfg: RunConfig = serde_json::from_value(tree).map_err(value_err)?;
        cfg.validate().map_err(value_err)?;
        self.inner = cfg;
        Ok(())
    }

    #[getter]
    pub fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    /// Materialize the dataset and split it into the session stream.
    pub fn split(&self) -> PyResult<PySessionStream> {
        let (stream, _) = pipeline::build_stream(&self.inner).map_err(value_err)?;
        Ok(PySessionStream { inner: stream })
    }

    pub fn __repr__(&self) -> String {
        format!(
            "Config(classes={}, dim={}, base={}, sessions={}x{}-way-{}-shot)",
            self.inner.dataset.num_classes,
            self.inner.dataset.dim,
            self.inner.dataset.split.base_class_count,
            self.inner.dataset.split.session_count,
            self.inner.dataset.split.way,
            self.inner.dataset.split.shot,
        )
    }
}

/// Serialized model state with stage flags.
#[pyclass(name = "Checkpoint", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    inner: limit_core::checkpoint::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: limit_core::checkpoint::Checkpoint::load(&path).map_err(value_err)?,
        })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    pub fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(runtime_err)
    }

    #[getter]
    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    pub fn pretrained(&self) -> bool {
        self.inner.model.pretrained
    }

    #[getter]
    pub fn meta_trained(&self) -> bool {
        self.inner.model.meta_trained
    }

    #[getter]
    pub fn num_classes(&self) -> usize {
        self.inner.model.classifier.num_classes()
    }

    pub fn __repr__(&self) -> String {
        format!(
            "Checkpoint(seed={}, classes={}, pretrained={}, meta_trained={})",
            self.inner.seed,
            self.inner.model.classifier.num_classes(),
            self.inner.model.pretrained,
            self.inner.model.meta_trained,
        )
    }
}

/// Incremental-protocol results: per-session accuracy and the headline
/// metrics.
#[pyclass(name = "Report", skip_from_py_object)]
#[derive(Clone)]
pub struct PyReport {
    inner: EvalReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    pub fn session_acc(&self) -> Vec<f64> {
        self.inner.session_acc.clone()
    }

    #[getter]
    pub fn pd(&self) -> f64 {
        self.inner.pd
    }

    #[getter]
    pub fn base_acc(&self) -> f64 {
        self.inner.base_acc
    }

    #[getter]
    pub fn inc_acc(&self) -> f64 {
        self.inner.inc_acc
    }

    #[getter]
    pub fn harmonic(&self) -> f64 {
        self.inner.harmonic
    }

    #[getter]
    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    pub fn class_order(&self) -> Vec<usize> {
        self.inner.class_order.clone()
    }

    #[getter]
    pub fn per_session_class_counts(&self) -> Vec<usize> {
        self.inner.per_session_class_counts.clone()
    }

    #[getter]
    pub fn confusion(&self) -> Vec<Vec<usize>> {
        self.inner.confusion.clone()
    }

    pub fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(runtime_err)
    }

    pub fn session_csv(&self) -> String {
        self.inner.session_csv()
    }

    pub fn confusion_csv(&self) -> String {
        self.inner.confusion_csv()
    }

    pub fn __repr__(&self) -> String {
        format!(
            "Report(session_acc={:?}, pd={}, harmonic={})",
            self.inner.session_acc, self.inner.pd, self.inner.harmonic
        )
    }
}

/// Pretrain on the base session; returns the checkpoint and the
/// per-epoch `(iteration, lr, loss, accuracy)` log.
#[pyfunction]
pub fn pretrain_model(config: &PyConfig) -> PyResult<(PyCheckpoint, Vec<(usize, f64, f64, f64)>)> {
    let cfg = &config.inner;
    let (stream, _) = pipeline::build_stream(cfg).map_err(value_err)?;
    let seed = cfg.train.seed;
    let mut state = pipeline::init_state(cfg, &stream, seed);
    state.calib.norm_before_dropout = cfg.model.norm_before_dropout;
    let mut rng = limit_core::rng_from_seed(seed.wrapping_add(1));
    let log = train::pretrain(&mut state, &stream.base, &cfg.train, &mut rng).map_err(value_err)?;
    Ok((
        PyCheckpoint {
            inner: limit_core::checkpoint::Checkpoint::new(seed, state),
        },
        log_tuples(&log),
    ))
}

/// Meta-train on sampled fake-incremental tasks starting from a
/// pretrained checkpoint.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, allow_cold = false))]
pub fn meta_train_model(
    config: &PyConfig,
    checkpoint: &PyCheckpoint,
    allow_cold: bool,
) -> PyResult<(PyCheckpoint, Vec<(usize, f64, f64, f64)>)> {
    if !checkpoint.inner.model.pretrained && !allow_cold {
        return Err(value_err(
            "checkpoint was never pretrained; pass allow_cold=True to proceed",
        ));
    }
    let cfg = &config.inner;
    let (stream, _) = pipeline::build_stream(cfg).map_err(value_err)?;
    let seed = cfg.train.seed;
    let mut state = checkpoint.inner.model.clone();
    let mut rng = limit_core::rng_from_seed(seed.wrapping_add(1));
    let log =
        train::meta_train(&mut state, &stream.base, &cfg.train, &mut rng).map_err(value_err)?;
    Ok((
        PyCheckpoint {
            inner: limit_core::checkpoint::Checkpoint::new(seed, state),
        },
        log_tuples(&log),
    ))
}

/// Run the incremental protocol from a checkpoint. `method` is one of
/// limit, proto, finetune, or kd.
#[pyfunction]
pub fn evaluate(config: &PyConfig, checkpoint: &PyCheckpoint, method: &str) -> PyResult<PyReport> {
    let cfg = &config.inner;
    let method = parse_method(method)?;
    let (stream, _) = pipeline::build_stream(cfg).map_err(value_err)?;
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
    let report =
        limit_core::eval::run_incremental(&checkpoint.inner.model, &stream, &opts, cfg.train.seed)
            .map_err(runtime_err)?;
    Ok(PyReport { inner: report })
}

/// Train from scratch with `method`'s full recipe and evaluate.
#[pyfunction]
pub fn run_method(config: &PyConfig, method: &str, seed: u64) -> PyResult<PyReport> {
    let method = parse_method(method)?;
    let run = pipeline::run_method(&config.inner, method, seed).map_err(runtime_err)?;
    Ok(PyReport { inner: run.report })
}

/// Run the five-variant ablation grid; returns the table as a JSON
/// string (same schema the CLI writes).
#[pyfunction]
pub fn run_ablation(config: &PyConfig, seeds: Vec<u64>) -> PyResult<String> {
    if seeds.is_empty() {
        return Err(value_err("seeds must be non-empty"));
    }
    let table = pipeline::run_ablation(&config.inner, &seeds).map_err(runtime_err)?;
    serde_json::to_string_pretty(&table).map_err(runtime_err)
}

/// Accuracy drop between the first and last session, in points.
#[pyfunction]
pub fn performance_drop(first: f64, last: f64) -> f64 {
    limit_core::eval::performance_drop(first, last)
}

/// Harmonic mean of base-class and new-class accuracy.
#[pyfunction]
pub fn harmonic_mean(base: f64, inc: f64) -> f64 {
    limit_core::eval::harmonic_mean(base, inc)
}

/// Top-1 accuracy (percent) of predictions against ground truth.
#[pyfunction]
pub fn top1_accuracy(predicted: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    if predicted.len() != truth.len() {
        return Err(value_err("predicted and truth lengths differ"));
    }
    Ok(limit_core::eval::top1_accuracy(&predicted, &truth))
}

/// Meta-training learning rate at `iteration` under the config's step
/// decay schedule.
#[pyfunction]
pub fn lr_at(config: &PyConfig, iteration: usize) -> f64 {
    train::lr_at(iteration, &config.inner.train.meta)
}

#[pymodule]
fn limit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCHEMA_VERSION", limit_core::SCHEMA_VERSION)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySessionStream>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(pretrain_model, m)?)?;
    m.add_function(wrap_pyfunction!(meta_train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_method, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(performance_drop, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(top1_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    // PyErr construction needs a live interpreter even off-thread
    fn init_python() {
        Python::initialize();
    }

    fn tiny_config() -> PyConfig {
        // built in one shot because `set` revalidates after every
        // override and the intermediate shapes would be inconsistent
        PyConfig::from_json(
            r#"{
  "dataset": {
    "source": "synth",
    "num_classes": 12, "dim": 8, "per_class": 12, "spread": 0.5,
    "csv_path": null,
    "split": {
      "base_class_count": 6, "way": 2, "shot": 2,
      "session_count": 2, "test_per_class": 4, "seed": 7
    }
  },
  "model": {
    "hidden_widths": [8], "embed_dim": 8, "calib_hidden": 8,
    "dropout_p": 0.5, "norm_before_dropout": false
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
}"#,
        )
        .unwrap()
    }

    #[test]
    fn dataset_synth_shape() {
        init_python();
        let ds = PyDataset::synth(5, 4, 6, 0.5, 1);
        assert_eq!(ds.__len__(), 30);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.class_counts().len(), 5);
        assert_eq!(ds.features().len(), 30);
    }

    #[test]
    fn config_override_round_trips() {
        init_python();
        let mut cfg = PyConfig::example();
        cfg.set("train.seed=42").unwrap();
        assert_eq!(cfg.seed(), 42);
        assert!(cfg.set("train.pretrain.lr=-1.0").is_err());
    }

    #[test]
    fn stage_functions_compose() {
        init_python();
        let cfg = tiny_config();
        let stream = cfg.split().unwrap();
        assert_eq!(stream.num_sessions(), 2);
        assert_eq!(stream.class_sets()[0].len(), 6);

        let (ckpt, log) = pretrain_model(&cfg).unwrap();
        assert!(ckpt.pretrained());
        assert_eq!(log.len(), 3);

        let (meta, _) = meta_train_model(&cfg, &ckpt, false).unwrap();
        assert!(meta.meta_trained());

        let report = evaluate(&cfg, &meta, "limit").unwrap();
        assert_eq!(report.session_acc().len(), 3);
        assert_eq!(report.per_session_class_counts(), vec![6, 8, 10]);
    }

    #[test]
    fn cold_checkpoint_is_refused_without_flag() {
        init_python();
        let mut cfg = tiny_config();
        cfg.set("train.pretrain.epochs=0").unwrap();
        let (cold, _) = pretrain_model(&cfg).unwrap();
        assert!(!cold.pretrained());
        assert!(meta_train_model(&cfg, &cold, false).is_err());
        assert!(meta_train_model(&cfg, &cold, true).is_ok());
    }

    #[test]
    fn metric_functions_match_core() {
        init_python();
        assert!((performance_drop(75.89, 57.41) - 18.48).abs() < 1e-9);
        let h = harmonic_mean(73.6, 41.8);
        assert!((h - 53.3).abs() < 0.05);
        assert_eq!(top1_accuracy(vec![1, 2], vec![1, 3]).unwrap(), 50.0);
        assert!(top1_accuracy(vec![1], vec![1, 2]).is_err());
    }
}
