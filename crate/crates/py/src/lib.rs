//! Python bindings: models, PGD, the schedule helpers, experiments and the
//! theory checks. Reports and records come back as plain dicts.

use std::path::PathBuf;

use generalist::harness::checkpoint::{load_checkpoint, save_checkpoint};
use generalist::harness::config::{ExperimentConfig, Method};
use generalist::harness::experiment::{compare_csv, Experiment};
use generalist::harness::metrics;
use generalist::theory::{self, ConvexFamily, RegretLedger};
use generalist::{Activation, AttackSpec, Batch, Error, GammaSchedule, Matrix, Norm, RngStream, SyncSchedule};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Layout { .. } => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

fn batch(inputs: &[Vec<f64>], labels: Vec<usize>, classes: usize) -> PyResult<Batch> {
    Batch::new(matrix(inputs)?, labels, classes).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Multilayer perceptron with softmax cross-entropy.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: generalist::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (layer_sizes, activation = "relu", seed = 0))]
    fn new(layer_sizes: Vec<usize>, activation: &str, seed: u64) -> PyResult<Self> {
        let act: Activation = activation.parse().map_err(err)?;
        let inner = generalist::Model::init(layer_sizes, act, &mut RngStream::new(seed, 0)).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().as_slice().to_vec()
    }

    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        let p = generalist::ParameterVector::new(values, self.inner.layout()).map_err(err)?;
        self.inner.set_params(p).map_err(err)
    }

    fn forward(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.forward(&matrix(&inputs)?).map_err(err)?))
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(&inputs)?).map_err(err)
    }

    /// Returns `(loss, parameter gradient, input gradient)`.
    fn loss_and_grads(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let b = batch(&inputs, labels, self.inner.classes())?;
        let g = self.inner.backward(&b).map_err(err)?;
        Ok((g.loss, g.params.into_values(), rows(&g.inputs)))
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, {:?})", self.inner.layer_sizes(), self.inner.activation())
    }
}

#[pyfunction]
#[pyo3(signature = (model, inputs, labels, norm, epsilon, step_size = None, steps = 20, random_start = false, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pgd_attack(
    model: &PyModel,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    norm: &str,
    epsilon: f64,
    step_size: Option<f64>,
    steps: usize,
    random_start: bool,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let norm: Norm = norm.parse().map_err(err)?;
    let spec = AttackSpec {
        norm,
        epsilon,
        step_size: step_size.unwrap_or(epsilon / 8.0),
        steps,
        random_start,
    };
    let b = batch(&inputs, labels, model.inner.classes())?;
    let adv = generalist::pgd_attack(&model.inner, &b, &spec, &mut RngStream::new(seed, 0)).map_err(err)?;
    Ok(rows(&adv))
}

#[pyfunction]
fn gamma_at(breakpoints: Vec<(f64, f64)>, progress: f64) -> PyResult<f64> {
    generalist::gamma_at(&GammaSchedule { breakpoints }, progress).map_err(err)
}

#[pyfunction]
fn should_redistribute(t_prime: usize, c: usize, t: usize) -> bool {
    let sync = SyncSchedule {
        t_prime,
        c,
        total_epochs: t.max(t_prime),
    };
    generalist::should_redistribute(&sync, t)
}

#[pyfunction]
#[pyo3(signature = (linf, l2, decimals = 2))]
fn union_rounded(linf: f64, l2: f64, decimals: u32) -> f64 {
    metrics::union_rounded(linf, l2, decimals)
}

#[pyfunction]
fn regret(per_task_losses: Vec<Vec<f64>>, oracle_losses: Vec<f64>) -> PyResult<f64> {
    theory::regret(&RegretLedger::new(per_task_losses, oracle_losses).map_err(err)?).map_err(err)
}

/// One configured training run.
#[pyclass(name = "Experiment", unsendable)]
struct PyExperiment {
    inner: Experiment,
}

#[pymethods]
impl PyExperiment {
    /// Builds a run from config text; defaults when `config` is None.
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => ExperimentConfig::parse(text).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self {
            inner: Experiment::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(err)?;
        Ok(Self {
            inner: Experiment::from_checkpoint(&ck).map_err(err)?,
        })
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        self.inner.epochs_done()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.finished()
    }

    #[getter]
    fn config_text(&self) -> String {
        self.inner.config_text.clone()
    }

    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let rec = self.inner.run_epoch().map_err(err)?;
        to_dict(py, &rec)
    }

    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let recs = self.inner.run(|_, _| Ok(())).map_err(err)?;
        recs.iter().map(|r| to_dict(py, r)).collect()
    }

    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.evaluate().map_err(err)?)
    }

    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.history())
    }

    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model(),
        }
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner.checkpoint()).map_err(err)
    }
}

/// Trains every listed method on one config and returns the CSV table.
#[pyfunction]
#[pyo3(signature = (config = None, methods = None))]
fn compare(config: Option<&str>, methods: Option<Vec<String>>) -> PyResult<String> {
    let cfg = match config {
        Some(text) => ExperimentConfig::parse(text).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    let roster: Vec<Method> = match methods {
        Some(m) => m.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(err)?,
        None => Method::ALL.to_vec(),
    };
    let rows = generalist::harness::experiment::compare(&cfg, &roster).map_err(err)?;
    Ok(compare_csv(&rows))
}

#[pyfunction]
#[pyo3(signature = (trials = 10_000, seed = 0))]
fn check_mixing_lemma(py: Python<'_>, trials: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    to_dict(py, &theory::check_mixing_lemma(trials, seed))
}

#[pyfunction]
#[pyo3(signature = (trials = 200, delta = 0.1, rounds = 100, seed = 0))]
fn check_error_bound(py: Python<'_>, trials: usize, delta: f64, rounds: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let r = theory::check_error_bound(&ConvexFamily::default(), trials, delta, rounds, seed).map_err(err)?;
    to_dict(py, &r)
}

/// Stability probe on the small built-in setup with `replacements` random swaps.
#[pyfunction]
#[pyo3(signature = (replacements = 4, seed = 0))]
fn stability_probe(py: Python<'_>, replacements: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let setup = theory::small_probe_setup(seed, None, 0.9).map_err(err)?;
    to_dict(py, &theory::stability_probe_random(&setup, replacements, seed).map_err(err)?)
}

#[pymodule]
fn generalist_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(pgd_attack, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_at, m)?)?;
    m.add_function(wrap_pyfunction!(should_redistribute, m)?)?;
    m.add_function(wrap_pyfunction!(union_rounded, m)?)?;
    m.add_function(wrap_pyfunction!(regret, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(check_mixing_lemma, m)?)?;
    m.add_function(wrap_pyfunction!(check_error_bound, m)?)?;
    m.add_function(wrap_pyfunction!(stability_probe, m)?)?;
    Ok(())
}
