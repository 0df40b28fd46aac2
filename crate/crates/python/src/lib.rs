//! Python bindings for `cotune`.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use cotune::harness::report::{emit_report, ReportOptions};
use cotune::harness::{run_experiment as run_exp, ExperimentConfig};
use cotune::metrics::{compute_kappa as kappa_of, distribution_distance as dist, DistanceKind, KappaConfig};
use cotune::optimizer::{CommitOptimizer, StepConfig};
use cotune::schedulers::{coordinated_rates as rates_of, Rates};
use cotune::tasks::{generate_dataset, Dataset as CoreDataset, TaskSpec as CoreSpec};
use cotune::theory::{bound_first_term, convergence_bound as bound_of, BoundInputs};
use cotune::{Error, Example};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Format(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let json = PyModule::import(py, "json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

fn kind(name: &str) -> PyResult<DistanceKind> {
    name.parse().map_err(err)
}

#[pyclass(module = "cotune_py", skip_from_py_object)]
#[derive(Clone)]
struct TaskSpec {
    inner: CoreSpec,
}

#[pymethods]
impl TaskSpec {
    /// `toy-qa` or `toy-caption`.
    #[staticmethod]
    #[pyo3(signature = (name, seed = 0))]
    fn preset(name: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreSpec::preset(name, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner: CoreSpec = toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        toml::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Model vocabulary; the task itself uses the first `used_tokens`.
    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab
    }

    #[getter]
    fn used_tokens(&self) -> usize {
        self.inner.layout().size()
    }

    fn generate(&self) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: generate_dataset(&self.inner).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("TaskSpec({:?}, hash={})", self.inner.kind, &self.inner.hash()[..12])
    }
}

#[pyclass(module = "cotune_py")]
struct Dataset {
    inner: CoreDataset,
}

impl Dataset {
    fn split(&self, split: &str) -> PyResult<&[Example]> {
        match split {
            "train" => Ok(&self.inner.train),
            "eval" => Ok(&self.inner.eval),
            other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        }
    }

    fn pick(&self, split: &str, indices: Option<Vec<usize>>) -> PyResult<Vec<Example>> {
        let all = self.split(split)?;
        match indices {
            None => Ok(all.to_vec()),
            Some(ix) => ix
                .into_iter()
                .map(|i| {
                    all.get(i)
                        .cloned()
                        .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range ({})", all.len())))
                })
                .collect(),
        }
    }
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreDataset::load(&path, None).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    #[getter]
    fn spec(&self) -> TaskSpec {
        TaskSpec {
            inner: self.inner.spec.clone(),
        }
    }

    #[pyo3(signature = (split = "train"))]
    fn len(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// `{"feature", "instruction", "answer"}` of one example.
    #[pyo3(signature = (index, split = "train"))]
    fn example(&self, py: Python<'_>, index: usize, split: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.pick(split, Some(vec![index]))?[0])
    }

    fn text_dump(&self) -> String {
        self.inner.text_dump()
    }
}

/// A freshly initialized model for a task. Op counters use `Cell`, so the
/// object stays on the thread that created it.
#[pyclass(module = "cotune_py", unsendable)]
struct Model {
    inner: cotune::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: PyRef<'_, TaskSpec>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: cotune::Model::init(&spec.inner.model_shape(), seed).map_err(err)?,
        })
    }

    #[getter]
    fn backbone_checksum(&self) -> String {
        self.inner.backbone_checksum()
    }

    /// Mean answer-token cross-entropy on a batch.
    #[pyo3(signature = (dataset, indices = None, split = "train"))]
    fn loss(&self, dataset: PyRef<'_, Dataset>, indices: Option<Vec<usize>>, split: &str) -> PyResult<f64> {
        self.inner.batch_loss(&dataset.pick(split, indices)?).map_err(err)
    }

    /// Balance measurements (κ, step distances, gradient norms, ...) at
    /// the given component rates, without moving the model.
    #[pyo3(signature = (dataset, indices, lr_s, lr_t, metric = "tv"))]
    fn measure(
        &mut self,
        py: Python<'_>,
        dataset: PyRef<'_, Dataset>,
        indices: Vec<usize>,
        lr_s: f64,
        lr_t: f64,
        metric: &str,
    ) -> PyResult<Py<PyAny>> {
        let batch = dataset.pick("train", Some(indices))?;
        let cfg = StepConfig {
            metric: kind(metric)?,
            ..StepConfig::default()
        };
        let mut opt = CommitOptimizer::new(&self.inner, cfg).map_err(err)?;
        let r = opt
            .step(&mut self.inner, &batch, Rates { lr_s, lr_t }, 0, false)
            .map_err(err)?;
        to_py(py, &r.record)
    }

    /// Greedy answer for one example.
    #[pyo3(signature = (dataset, index, split = "eval", max_len = 8))]
    fn decode(&self, dataset: PyRef<'_, Dataset>, index: usize, split: &str, max_len: usize) -> PyResult<Vec<usize>> {
        let e = &dataset.pick(split, Some(vec![index]))?[0];
        self.inner
            .greedy_decode(&e.feature, &e.instruction, max_len, None)
            .map_err(err)
    }
}

/// Distance between two categorical distributions: `tv` or `sqrt-js`.
#[pyfunction]
#[pyo3(signature = (p, q, metric = "tv"))]
fn distribution_distance(p: Vec<f64>, q: Vec<f64>, metric: &str) -> PyResult<f64> {
    dist(&p, &q, kind(metric)?).map_err(err)
}

/// Clamped ratio `d_t / d_s`; returns `(kappa, degenerate)`.
#[pyfunction]
fn compute_kappa(d_t: f64, d_s: f64) -> PyResult<(f64, bool)> {
    let k = kappa_of(d_t, d_s, &KappaConfig::default()).map_err(err)?;
    Ok((k.value, k.degenerate))
}

/// `(lr_t, lr_s)` from a smoothed κ.
#[pyfunction]
#[pyo3(signature = (kappa_ma, alpha = 1e-4, gamma = 0.5))]
fn coordinated_rates(kappa_ma: f64, alpha: f64, gamma: f64) -> PyResult<(f64, f64)> {
    rates_of(kappa_ma, alpha, gamma, &KappaConfig::default()).map_err(err)
}

/// The Adam-variant convergence bound; also returns its first term.
#[pyfunction]
#[pyo3(signature = (k, alpha, beta2, lam, r, l, f0, f_star, eps = 1e-8, n = None))]
#[allow(clippy::too_many_arguments)]
fn convergence_bound(
    k: u64,
    alpha: f64,
    beta2: f64,
    lam: f64,
    r: f64,
    l: f64,
    f0: f64,
    f_star: f64,
    eps: f64,
    n: Option<u64>,
) -> PyResult<(f64, f64)> {
    let b = BoundInputs {
        k,
        alpha,
        beta2,
        lambda: lam,
        r,
        l,
        f0,
        f_star,
        eps,
        n,
    };
    Ok((bound_of(&b).map_err(err)?, bound_first_term(&b).map_err(err)?))
}

/// Runs every seed of a TOML experiment config; returns the last record
/// of each run.
#[pyfunction]
#[pyo3(signature = (config_toml, steps = None, out_dir = None))]
fn run_experiment(
    py: Python<'_>,
    config_toml: &str,
    steps: Option<u64>,
    out_dir: Option<PathBuf>,
) -> PyResult<Vec<Py<PyAny>>> {
    let mut cfg = ExperimentConfig::from_toml(config_toml).map_err(err)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let outs = py.detach(|| run_exp(&cfg)).map_err(err)?;
    outs.iter()
        .map(|o| to_py(py, &o.log.records.last()))
        .collect()
}

/// Summaries over run directories, written into `out`; returns the rows.
#[pyfunction]
fn report(py: Python<'_>, runs: Vec<PathBuf>, out: PathBuf) -> PyResult<Py<PyAny>> {
    let r = emit_report(&runs, &out, &ReportOptions::default()).map_err(err)?;
    to_py(py, &r.runs)
}

#[pymodule]
fn cotune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TaskSpec>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(distribution_distance, m)?)?;
    m.add_function(wrap_pyfunction!(compute_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(coordinated_rates, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_bound, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
