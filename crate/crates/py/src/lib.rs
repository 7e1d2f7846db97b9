//! Python module `cyclet`: configs, models, the pipeline subcommands and the
//! scalar helpers (pseudo-labeling, top-k, score, learning rate).

use std::path::PathBuf;

use cyclet_core::cli::{self, Context, Sweep};
use cyclet_core::config::RunConfig;
use cyclet_core::data::Split;
use cyclet_core::eval::{measure_latency, ScoreInputs};
use cyclet_core::models::{build, load_checkpoint, save_checkpoint, write_checkpoint, Arch, ModelConfig};
use cyclet_core::nncore::{LrSchedule, Tensor};
use cyclet_core::{Error, ErrorKind};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn py_err(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(e.to_string()),
        ErrorKind::Data => PyOSError::new_err(e.to_string()),
        ErrorKind::Runtime => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for cyclet_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::parse(text, "<python>").py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).py()? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).py()
    }

    /// Copy with `seed` applied to training and dataset generation.
    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.clone().with_seed(seed) }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, v: PathBuf) {
        self.inner.out_dir = v;
    }

    #[getter]
    fn dataset_root(&self) -> PathBuf {
        self.inner.dataset_root.clone()
    }

    #[setter]
    fn set_dataset_root(&mut self, v: PathBuf) {
        self.inner.dataset_root = v;
    }

    #[getter]
    fn tau_student(&self) -> f64 {
        self.inner.tau_student
    }

    #[setter]
    fn set_tau_student(&mut self, v: f64) -> PyResult<()> {
        cyclet_core::ssda::validate_tau(v).py()?;
        self.inner.tau_student = v;
        Ok(())
    }

    #[getter]
    fn ssda_enabled(&self) -> bool {
        self.inner.ssda_enabled
    }

    #[setter]
    fn set_ssda_enabled(&mut self, v: bool) {
        self.inner.ssda_enabled = v;
    }

    #[getter]
    fn augment_enabled(&self) -> bool {
        self.inner.augment_enabled
    }

    #[setter]
    fn set_augment_enabled(&mut self, v: bool) {
        self.inner.augment_enabled = v;
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, out_dir={:?}, dataset_root={:?})", self.inner.seed, self.inner.out_dir, self.inner.dataset_root)
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: cyclet_core::models::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model with default settings for `arch` (`"teacher"` or `"student"`).
    #[staticmethod]
    #[pyo3(signature = (arch, seed=0, num_classes=10, input_side=None))]
    fn build(arch: &str, seed: u64, num_classes: usize, input_side: Option<usize>) -> PyResult<Self> {
        let arch: Arch = arch.parse().py()?;
        let base = match arch {
            Arch::Teacher => ModelConfig::teacher_default(),
            Arch::Student => ModelConfig::student_default(),
        };
        let cfg = ModelConfig { num_classes, input_side: input_side.unwrap_or(base.input_side), ..base };
        Ok(Self { inner: build(arch, &cfg, seed).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &write_checkpoint(&self.inner))
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.arch().as_str()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.inner.config().input_side
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params().scalar_count()
    }

    /// Class probabilities for `batch` normalized images given as a flat
    /// `batch * 3 * side * side` list (NCHW).
    fn predict(&self, py: Python<'_>, data: Vec<f32>, batch: usize) -> PyResult<Vec<Vec<f32>>> {
        let side = self.inner.config().input_side;
        let k = self.inner.num_classes();
        let probs = py
            .detach(|| Tensor::new(vec![batch, 3, side, side], data).and_then(|x| self.inner.predict_probs(x)))
            .py()?;
        Ok(probs.data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    #[pyo3(signature = (iterations=20, warmup=3))]
    fn latency<'py>(&self, py: Python<'py>, iterations: usize, warmup: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = py.detach(|| measure_latency(&self.inner, iterations, warmup)).py()?;
        let d = PyDict::new(py);
        d.set_item("samples_ms", r.samples_ms.clone())?;
        d.set_item("mean_ms", r.mean_ms)?;
        d.set_item("std_ms", r.std_ms)?;
        d.set_item("min_ms", r.min_ms())?;
        d.set_item("max_ms", r.max_ms())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Model(arch={}, classes={}, params={})", self.arch(), self.num_classes(), self.param_count())
    }
}

#[pyfunction]
fn confidence(probs: Vec<f32>) -> PyResult<f32> {
    cyclet_core::ssda::confidence(&probs).py()
}

/// `(class, confidence)` when the top probability meets `tau`, else `None`.
#[pyfunction]
fn pseudo_label(probs: Vec<f32>, tau: f64) -> PyResult<Option<(usize, f32)>> {
    cyclet_core::ssda::pseudo_label(&probs, tau).py()
}

#[pyfunction]
fn topk_accuracy(probs: Vec<Vec<f32>>, labels: Vec<usize>, k: usize) -> PyResult<f64> {
    let width = probs.first().map_or(0, Vec::len);
    if probs.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    cyclet_core::eval::topk_accuracy(&probs.concat(), width, &labels, k).py()
}

#[pyfunction]
#[pyo3(signature = (top1, top3, runtime_ms, c=1.0))]
fn challenge_score(top1: f64, top3: f64, runtime_ms: f64, c: f64) -> PyResult<f64> {
    cyclet_core::eval::challenge_score(&ScoreInputs { top1, top3, runtime_ms, c }).py()
}

#[pyfunction]
#[pyo3(signature = (epoch, lr0=1e-3, decay_factor=0.1, decay_period=20))]
fn lr_at(epoch: i64, lr0: f64, decay_factor: f64, decay_period: u32) -> PyResult<f64> {
    LrSchedule { lr0, decay_factor, decay_period }.lr_at(epoch).py()
}

fn context(config: &PyConfig, checkpoint: Option<PathBuf>) -> PyResult<Context> {
    let ctx = Context::new(config.inner.clone()).py()?;
    Ok(match checkpoint {
        Some(p) => ctx.with_checkpoint(p),
        None => ctx,
    })
}

/// Generate the synthetic dataset; returns `(train, val, test)` counts.
#[pyfunction]
fn gen_data(py: Python<'_>, config: PyConfig) -> PyResult<(usize, usize, usize)> {
    let ctx = context(&config, None)?;
    let out = py.detach(|| cli::cmd_gen_data(&ctx)).py()?;
    Ok((out.counts[0], out.counts[1], out.counts[2]))
}

/// Train and refine the teacher; returns the refined model.
#[pyfunction]
fn train_teacher(py: Python<'_>, config: PyConfig) -> PyResult<PyModel> {
    let ctx = context(&config, None)?;
    let out = py.detach(|| cli::cmd_train_teacher(&ctx)).py()?;
    Ok(PyModel { inner: out.refined })
}

/// Pseudo-label the unlabeled split; returns `(accepted, total)`.
#[pyfunction]
#[pyo3(signature = (config, checkpoint=None))]
fn pseudo_label_dataset(py: Python<'_>, config: PyConfig, checkpoint: Option<PathBuf>) -> PyResult<(usize, usize)> {
    let ctx = context(&config, checkpoint)?;
    let (_, report) = py.detach(|| cli::cmd_pseudo_label(&ctx)).py()?;
    Ok((report.accepted, report.total))
}

/// Cycle-train the student; returns `(stage, top1, top3)` per stage.
#[pyfunction]
#[pyo3(signature = (config, rows=None))]
fn train_student(py: Python<'_>, config: PyConfig, rows: Option<PathBuf>) -> PyResult<Vec<(String, f64, f64)>> {
    let ctx = context(&config, None)?;
    let run = py.detach(|| cli::cmd_train_student(&ctx, rows.as_deref())).py()?;
    Ok(run
        .log
        .stages
        .iter()
        .filter_map(|s| s.metrics.map(|m| (s.name.as_str().to_string(), m.top1, m.top3)))
        .collect())
}

/// `(top1, top3)` of a checkpoint on the `test` or `train` split.
#[pyfunction]
#[pyo3(signature = (config, checkpoint=None, split="test"))]
fn evaluate(py: Python<'_>, config: PyConfig, checkpoint: Option<PathBuf>, split: &str) -> PyResult<(f64, f64)> {
    let split = match split {
        "test" => Split::Test,
        "train" => Split::Train,
        other => return Err(PyValueError::new_err(format!("split must be `test` or `train`, got `{other}`"))),
    };
    let ctx = context(&config, checkpoint)?;
    let m = py.detach(|| cli::cmd_eval(&ctx, split)).py()?;
    Ok((m.top1, m.top3))
}

/// Latency samples, test accuracy and composite score of a checkpoint.
#[pyfunction]
#[pyo3(name = "bench", signature = (config, checkpoint=None))]
fn bench_checkpoint<'py>(py: Python<'py>, config: PyConfig, checkpoint: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let ctx = context(&config, checkpoint)?;
    let b = py.detach(|| cli::cmd_bench(&ctx)).py()?;
    let d = PyDict::new(py);
    d.set_item("samples_ms", b.latency.samples_ms.clone())?;
    d.set_item("mean_ms", b.latency.mean_ms)?;
    d.set_item("top1", b.metrics.top1)?;
    d.set_item("top3", b.metrics.top3)?;
    d.set_item("score", b.score)?;
    Ok(d)
}

/// Run a sweep (`threshold`, `stages`, `ssda-aug` or `all`); returns
/// `{table: [(label, top1_mean, top3_mean), ...]}`.
#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: PyConfig, which: &str) -> PyResult<Bound<'py, PyDict>> {
    let sweep = match which {
        "threshold" => Sweep::Threshold,
        "stages" => Sweep::Stages,
        "ssda-aug" => Sweep::SsdaAug,
        "all" => Sweep::All,
        other => return Err(PyValueError::new_err(format!("unknown sweep `{other}`"))),
    };
    let ctx = context(&config, None)?;
    let report = py.detach(|| cli::cmd_ablate(&ctx, sweep)).py()?;
    let d = PyDict::new(py);
    for t in &report.tables {
        let rows: Vec<(String, f64, f64)> = t.rows.iter().map(|r| (r.label.clone(), r.top1_mean(), r.top3_mean())).collect();
        d.set_item(&t.name, rows)?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "cyclet")]
fn cyclet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    for f in [
        wrap_pyfunction!(confidence, m)?,
        wrap_pyfunction!(pseudo_label, m)?,
        wrap_pyfunction!(topk_accuracy, m)?,
        wrap_pyfunction!(challenge_score, m)?,
        wrap_pyfunction!(lr_at, m)?,
        wrap_pyfunction!(gen_data, m)?,
        wrap_pyfunction!(train_teacher, m)?,
        wrap_pyfunction!(pseudo_label_dataset, m)?,
        wrap_pyfunction!(train_student, m)?,
        wrap_pyfunction!(evaluate, m)?,
        wrap_pyfunction!(bench_checkpoint, m)?,
        wrap_pyfunction!(ablate, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
