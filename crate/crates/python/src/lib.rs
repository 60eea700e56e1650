use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdfcil::autograd::{Graph, Var};
use rdfcil::config::{load_config, ExperimentConfig};
use rdfcil::error::Error;
use rdfcil::losses::{self, ClassCounters, LossWeights, TripletSelection};
use rdfcil::metrics::RunReport;
use rdfcil::model::{BackboneConfig, IncrementalModel};
use rdfcil::protocol::TaskSchedule;
use rdfcil::tensor::Tensor;

create_exception!(pyrdfcil, ConfigError, PyValueError);
create_exception!(pyrdfcil, RunError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => ConfigError::new_err(e.to_string()),
        Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        _ => RunError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(py_err)
}

fn unflatten(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

/// Value and gradient with respect to `x` of a scalar loss.
fn value_and_grad(x: Tensor<f64>, build: impl FnOnce(&mut Graph<f64>, Var) -> rdfcil::error::Result<Var>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let loss = build(&mut g, v).map_err(py_err)?;
    let grads = g.backward(loss).map_err(py_err)?;
    let grad = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((g.value(loss).item(), unflatten(&grad)))
}

#[pyclass(name = "Config", module = "pyrdfcil")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::preset(name).map_err(py_err)?,
        })
    }

    /// Preset, then `path`, then `overrides` (each `key=value`).
    #[staticmethod]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn load(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: load_config(path.as_deref(), &overrides).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_lock(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::from_lock(text).map_err(py_err)?,
        })
    }

    fn lock(&self) -> PyResult<String> {
        self.inner.lock_text().map_err(py_err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn preset_name(&self) -> String {
        self.inner.preset.clone()
    }

    #[getter]
    fn get_out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.out = out;
    }

    #[getter]
    fn get_seeds(&self) -> Vec<u64> {
        self.inner.protocol.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.protocol.seeds = seeds;
    }

    fn __repr__(&self) -> String {
        format!("Config(preset={:?}, out={:?})", self.inner.preset, self.inner.out)
    }
}

#[pyclass(name = "TaskSchedule", module = "pyrdfcil")]
struct PyTaskSchedule {
    inner: TaskSchedule,
}

#[pymethods]
impl PyTaskSchedule {
    #[staticmethod]
    fn split_equal(n_classes: usize, n_tasks: usize, seed: u64) -> PyResult<Self> {
        Ok(PyTaskSchedule {
            inner: rdfcil::protocol::split_equal(n_classes, n_tasks, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn split_half_then_equal(n_classes: usize, n_tasks: usize, seed: u64) -> PyResult<Self> {
        Ok(PyTaskSchedule {
            inner: rdfcil::protocol::split_half_then_equal(n_classes, n_tasks, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn class_order(&self) -> Vec<usize> {
        self.inner.class_order.clone()
    }

    #[getter]
    fn task_sizes(&self) -> Vec<usize> {
        self.inner.task_sizes.clone()
    }

    #[getter]
    fn n_tasks(&self) -> usize {
        self.inner.n_tasks()
    }

    /// Class ids of task `task` (1-based).
    fn task_classes(&self, task: usize) -> PyResult<Vec<usize>> {
        self.inner.task_classes(task).map(|c| c.to_vec()).map_err(py_err)
    }

    /// Head column of a dataset class id.
    fn global_label(&self, class_id: usize) -> Option<usize> {
        self.inner.global_label(class_id)
    }
}

#[pyclass(name = "RunReport", module = "pyrdfcil")]
struct PyRunReport {
    inner: RunReport,
}

#[pymethods]
impl PyRunReport {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunReport {
            inner: RunReport::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.clone()
    }

    #[getter]
    fn accuracies(&self) -> Vec<f64> {
        self.inner.accuracies.clone()
    }

    #[getter]
    fn last_accuracy(&self) -> f64 {
        self.inner.last_accuracy
    }

    #[getter]
    fn average_accuracy(&self) -> f64 {
        self.inner.average_accuracy
    }

    fn is_complete(&self) -> bool {
        self.inner.is_complete()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunReport(variant={:?}, seed={}, last={:.4}, average={:.4})",
            self.inner.variant, self.inner.seed, self.inner.last_accuracy, self.inner.average_accuracy
        )
    }
}

/// Incremental classifier with an expanding head.
#[pyclass(name = "Model", module = "pyrdfcil")]
struct PyModel {
    inner: IncrementalModel<f32>,
}

#[pymethods]
impl PyModel {
    /// `input_shape` is (height, width, channels).
    #[new]
    #[pyo3(signature = (classes, input_shape=(32, 32, 3), widths=(16, 32, 64), blocks_per_stage=5, seed=0))]
    fn new(
        classes: usize,
        input_shape: (usize, usize, usize),
        widths: (usize, usize, usize),
        blocks_per_stage: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = BackboneConfig {
            widths: [widths.0, widths.1, widths.2],
            blocks_per_stage,
        };
        let inner = IncrementalModel::new(&cfg, input_shape, classes, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    fn expand(&mut self, new_classes: usize, seed: u64) -> PyResult<()> {
        self.inner
            .head
            .expand(new_classes, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(py_err)
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.head.class_count()
    }

    #[getter]
    fn task_sizes(&self) -> Vec<usize> {
        self.inner.head.task_sizes().to_vec()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.extractor.embed_dim()
    }

    /// Logits for a flat NCHW batch of `n` images.
    fn logits(&self, images: Vec<f32>, n: usize) -> PyResult<Vec<Vec<f32>>> {
        let (h, w, c) = self.inner.extractor.input_shape();
        let x = Tensor::new(vec![n, c, h, w], images).map_err(py_err)?;
        let out = self.inner.logits(&x).map_err(py_err)?;
        let k = out.shape()[1];
        Ok(out.data().chunks(k).map(|r| r.to_vec()).collect())
    }

    fn predict(&self, images: Vec<f32>, n: usize) -> PyResult<Vec<usize>> {
        let (h, w, c) = self.inner.extractor.input_shape();
        let x = Tensor::new(vec![n, c, h, w], images).map_err(py_err)?;
        self.inner.predict(&x).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (n_prev, n_new, lce=0.5, hkd=0.15, rkd=0.5))]
fn adaptive_factors<'py>(py: Python<'py>, n_prev: usize, n_new: usize, lce: f64, hkd: f64, rkd: f64) -> PyResult<Bound<'py, PyDict>> {
    let f = losses::adaptive_factors(n_prev, n_new, LossWeights { lce, hkd, rkd }).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("alpha", f.alpha)?;
    d.set_item("beta", f.beta)?;
    d.set_item("lce", f.effective_lce)?;
    d.set_item("hkd", f.effective_hkd)?;
    d.set_item("rkd", f.effective_rkd)?;
    Ok(d)
}

/// Distillation loss and its gradient with respect to `student`.
#[pyfunction]
fn hkd_loss(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let t = matrix(&teacher)?;
    let s = matrix(&student)?;
    let classes = s.shape()[1];
    value_and_grad(s, |g, v| {
        let tv = g.constant(t);
        losses::hkd_loss(g, tv, v, classes)
    })
}

/// Local cross-entropy and its gradient with respect to `logits`.
#[pyfunction]
fn lce_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    value_and_grad(matrix(&logits)?, |g, v| losses::lce_loss(g, v, &labels))
}

/// Angle-wise relational loss over all triplets, gradient with respect to `student`.
#[pyfunction]
fn rkd_angle_loss(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let t = matrix(&teacher)?;
    value_and_grad(matrix(&student)?, |g, v| {
        let tv = g.constant(t);
        losses::rkd_angle_loss(g, tv, v, &TripletSelection::All)
    })
}

/// Class-balanced cross-entropy with per-class sample counts.
#[pyfunction]
fn gce_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>, counts: Vec<u64>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let counters = ClassCounters::from_counts(counts);
    value_and_grad(matrix(&logits)?, |g, v| losses::gce_loss(g, v, &labels, &counters))
}

#[pyfunction]
fn accuracy(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    rdfcil::metrics::accuracy(&predictions, &labels).map_err(py_err)
}

#[pyfunction]
fn average_incremental(accuracies: Vec<f64>) -> PyResult<f64> {
    rdfcil::metrics::average_incremental(&accuracies).map_err(py_err)
}

/// Trains every configured seed; releases the GIL while running.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<PyRunReport>> {
    let cfg = config.inner.clone();
    let reports = py.detach(|| rdfcil::experiment::run_experiment(&cfg)).map_err(py_err)?;
    Ok(reports.into_iter().map(|inner| PyRunReport { inner }).collect())
}

/// Runs the named variants (`full`, `no_rkd`, `no_hkd+no_rkd`, ...) and returns the table.
#[pyfunction]
fn ablate(py: Python<'_>, config: &PyConfig, variants: Vec<String>) -> PyResult<String> {
    let cfg = config.inner.clone();
    let vs = variants
        .iter()
        .map(|v| rdfcil::cli::parse_variant(v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let rows = py.detach(|| rdfcil::experiment::ablate(&cfg, &vs)).map_err(py_err)?;
    Ok(rdfcil::metrics::format_table(&rows))
}

/// Aggregates finished runs under `dirs` into `out`; returns the table text.
#[pyfunction]
fn report(dirs: Vec<PathBuf>, out: PathBuf) -> PyResult<String> {
    rdfcil::experiment::report(&dirs, &out).map(|r| r.table).map_err(py_err)
}

/// Same as the command-line tool; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| rdfcil::cli::run_cli(std::iter::once("rdfcil".to_string()).chain(args)))
}

#[pymodule]
pub fn pyrdfcil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("RunError", m.py().get_type::<RunError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTaskSchedule>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(adaptive_factors, m)?)?;
    m.add_function(wrap_pyfunction!(hkd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rkd_angle_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_incremental, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
