//! Python bindings for `slm-core`.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`);
//! structured results come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use slm_core::autodiff::Tensor;
use slm_core::config::Config as CoreConfig;
use slm_core::data::{generate_synthetic_pda, load_csv_dataset, write_csv, PdaTask};
use slm_core::eval::{self, AblationVariant};
use slm_core::label;
use slm_core::select::{self, gumbel_softmax_sample};
use slm_core::trainer::{self, Checkpoint, Trainer as CoreTrainer};
use slm_core::{cli, verify};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Serializes through JSON so Python receives ordinary dicts and lists.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(value_err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Flat `key = value` configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overlaid with `key = value` text.
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let mut inner = CoreConfig::default();
        if let Some(t) = text {
            inner.apply_text(t).map_err(value_err)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| value_err(format!("{}: {e}", path.display())))?;
        Self::new(Some(&text))
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        slm_core::config::KEYS.to_vec()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(value_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| value_err(format!("unknown key `{key}`")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(value_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, steps={})",
            self.inner.seed, self.inner.train.steps
        )
    }
}

/// A partial domain adaptation task: labeled source, unlabeled target, and
/// the held-out target labels used only for evaluation.
#[pyclass(name = "Task", skip_from_py_object)]
struct PyTask {
    inner: PdaTask,
}

#[pymethods]
impl PyTask {
    /// The synthetic task described by `config` (its CSV path, if set, is ignored).
    #[staticmethod]
    fn synthetic(config: &PyConfig) -> PyResult<Self> {
        generate_synthetic_pda(&config.inner.task_spec())
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// The task a config points at: `data.path` if set, else the generator.
    #[staticmethod]
    fn from_config(config: &PyConfig) -> PyResult<Self> {
        cli::load_task(&config.inner)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        load_csv_dataset(&path)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        write_csv(&self.inner, &path).map_err(runtime_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.train.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.train.num_classes
    }

    #[getter]
    fn shared(&self) -> Vec<usize> {
        self.inner.shared.clone()
    }

    #[getter]
    fn source_features(&self) -> Vec<Vec<f64>> {
        self.inner.train.source.features.clone()
    }

    #[getter]
    fn source_labels(&self) -> Vec<usize> {
        self.inner.train.source.labels.clone()
    }

    #[getter]
    fn target_features(&self) -> Vec<Vec<f64>> {
        self.inner.train.target.features.clone()
    }

    /// Held-out target labels (`None` where unknown). Never seen by training.
    #[getter]
    fn eval_target_labels(&self) -> Vec<Option<usize>> {
        self.inner.eval.target_labels.clone()
    }

    /// Per-source-sample shared-class bit. Never seen by training.
    #[getter]
    fn eval_oracle(&self) -> Vec<bool> {
        self.inner.eval.oracle.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Task(dim={}, classes={}, source={}, target={})",
            self.inner.train.dim(),
            self.inner.train.num_classes,
            self.inner.train.source.features.len(),
            self.inner.train.target.features.len()
        )
    }
}

/// Trained parameters together with the config and shapes that made them.
#[pyclass(name = "Model", skip_from_py_object)]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        trainer::load_checkpoint(&path)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Checkpoint::from_bytes(data)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, &path).map_err(runtime_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Classifier logits `F(G(x))`.
    fn logits(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self
            .inner
            .models
            .classify(&matrix(rows)?)
            .map_err(value_err)?;
        Ok(rows_of(&out))
    }

    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let out = self
            .inner
            .models
            .classify(&matrix(rows)?)
            .map_err(value_err)?;
        Ok(eval::argmax_rows(&out))
    }

    /// Extractor features `G(x)`.
    fn features(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self
            .inner
            .models
            .features(&matrix(rows)?)
            .map_err(value_err)?;
        Ok(rows_of(&out))
    }

    /// Deterministic selector decisions (`True` = keep).
    fn select(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<bool>> {
        eval::selector_decisions(&self.inner.models, &matrix(rows)?).map_err(value_err)
    }

    /// Accuracy, selector quality and feature distances on `task`.
    fn evaluate<'py>(&self, py: Python<'py>, task: &PyTask) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &self.inner.config;
        let data = trainer::prepare_data(cfg, &task.inner);
        let (accuracy, selector, distances) =
            trainer::evaluate_models(cfg, &self.inner.models, &data, &task.inner)
                .map_err(value_err)?;
        to_py(
            py,
            &serde_json::json!({ "target_accuracy": accuracy, "selector": selector, "distances": distances }),
        )
    }
}

/// Step-by-step training.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    trainer: CoreTrainer,
    data: slm_core::data::TrainData,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig, task: &PyTask) -> PyResult<Self> {
        config.inner.validate().map_err(value_err)?;
        let data = trainer::prepare_data(&config.inner, &task.inner);
        let trainer = CoreTrainer::new(&config.inner, &data).map_err(value_err)?;
        Ok(Self { trainer, data })
    }

    /// One update; returns the step's metrics record.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let rec = self.trainer.step(&self.data).map_err(runtime_err)?;
        to_py(py, &rec)
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.trainer.steps_done()
    }

    fn model(&self) -> PyModel {
        PyModel {
            inner: self.trainer.checkpoint(),
        }
    }
}

/// Full training run. Returns `(report, model)`.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    task: &PyTask,
) -> PyResult<(Bound<'py, PyAny>, PyModel)> {
    config.inner.validate().map_err(value_err)?;
    let run = trainer::train(&config.inner, &task.inner, &mut |_| Ok(())).map_err(runtime_err)?;
    Ok((
        to_py(py, &run.report)?,
        PyModel {
            inner: run.trainer.checkpoint(),
        },
    ))
}

/// Ablation sweep over `seeds`; `rows` adds named optional rows.
#[pyfunction]
#[pyo3(signature = (config, seeds, rows=None))]
fn ablate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    seeds: Vec<u64>,
    rows: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut variants = AblationVariant::CANONICAL.to_vec();
    for r in rows.unwrap_or_default() {
        variants.push(r.parse().map_err(value_err)?);
    }
    let base = &config.inner;
    let out = eval::run_ablation(base, &seeds, &variants, |seed| {
        cli::load_task(&CoreConfig {
            seed,
            ..base.clone()
        })
    })
    .map_err(runtime_err)?;
    to_py(py, &out)
}

/// Symmetric average Hausdorff distance between two point sets.
#[pyfunction]
fn average_hausdorff(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    select::average_hausdorff(&matrix(x)?, &matrix(y)?).map_err(value_err)
}

/// Sliced 1-Wasserstein distance with `projections` seeded directions.
#[pyfunction]
#[pyo3(signature = (x, y, projections=128, seed=0))]
fn sliced_wasserstein(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    projections: usize,
    seed: u64,
) -> PyResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eval::sliced_wasserstein(&matrix(x)?, &matrix(y)?, projections, &mut rng).map_err(value_err)
}

/// `p^(1/alpha)`, renormalized.
#[pyfunction]
fn sharpen(p: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    label::sharpen(&p, alpha).map_err(value_err)
}

/// Fraction of `draws` Gumbel-Softmax samples whose hard decision is "select".
#[pyfunction]
#[pyo3(signature = (log_alpha, tau, draws, seed=0))]
fn gumbel_select_rate(log_alpha: [f64; 2], tau: f64, draws: usize, seed: u64) -> PyResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        hits += usize::from(
            gumbel_softmax_sample(log_alpha, tau, &mut rng)
                .map_err(value_err)?
                .hard,
        );
    }
    Ok(hits as f64 / draws.max(1) as f64)
}

/// Finite-difference check of every primitive and loss: `(name, points, max_rel_err)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn grad_check(seed: u64) -> PyResult<Vec<(String, usize, f64)>> {
    let rows = verify::run_suite(seed).map_err(runtime_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.name, r.points, r.max_rel_err))
        .collect())
}

#[pymodule]
fn slm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(average_hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(sliced_wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(sharpen, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_select_rate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("TOLERANCE", verify::TOLERANCE)?;
    Ok(())
}
