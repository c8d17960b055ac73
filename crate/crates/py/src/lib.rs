//! Python bindings: `import fgpl`.
//!
//! Configs travel as JSON strings (the same schema the CLI reads); reports come
//! back as dicts.

use fgpl_core::data::{self, SyntheticSpec};
use fgpl_core::experiment::{self, DEFAULT_HOLDOUT};
use fgpl_core::lattice::{self as lat, Accumulation, BatchPredictions, ClassDistribution};
use fgpl_core::losses::{self, LossConfig, LossMode, LossValue, Objective};
use fgpl_core::metrics::{self, ConfusionMatrix, ReportConfig};
use fgpl_core::TrainConfig;
use pyo3::exceptions::{PyFloatingPointError, PyValueError};
use pyo3::prelude::*;

fn err(e: fgpl_core::Error) -> PyErr {
    match e {
        fgpl_core::Error::NumericalFailure { .. } => PyFloatingPointError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn loss_config(config: Option<&str>, mode: Option<&str>) -> PyResult<LossConfig> {
    let mut cfg = match config {
        Some(text) => serde_json::from_str::<LossConfig>(text).map_err(json_err)?,
        None => LossConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = m.parse::<LossMode>().map_err(err)?;
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn pair(v: LossValue) -> (f64, Vec<f64>) {
    (v.value, v.grad)
}

/// Row-stochastic class-correlation matrix.
#[pyclass(module = "fgpl", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Lattice(lat::Lattice);

#[pymethods]
impl Lattice {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        lat::Lattice::from_rows(rows).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity(classes: usize) -> Self {
        Self(lat::Lattice::identity(classes))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        lat::Lattice::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.to_rows()
    }

    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        let c = self.0.num_classes();
        if i >= c || j >= c {
            return Err(PyValueError::new_err(format!("index ({i}, {j}) out of range for {c} classes")));
        }
        Ok(self.0.get(i, j))
    }

    fn correlation_ratio(&self, i: usize, j: usize) -> PyResult<f64> {
        self.0.correlation_ratio(i, j).map_err(err)
    }

    fn topk_correlated(&self, i: usize, k: usize) -> PyResult<Vec<usize>> {
        self.0.topk_correlated(i, k).map_err(err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Lattice(classes={})", self.0.num_classes())
    }
}

/// A lattice that follows the model batch by batch.
#[pyclass(module = "fgpl")]
struct AdaptiveLattice(lat::AdaptiveLattice);

#[pymethods]
impl AdaptiveLattice {
    #[new]
    #[pyo3(signature = (initial, tau=0.99))]
    fn new(initial: &Lattice, tau: f64) -> PyResult<Self> {
        lat::AdaptiveLattice::new(initial.0.clone(), tau).map(Self).map_err(err)
    }

    /// One refinement from a batch of probability rows and their labels.
    fn refine(&mut self, probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<()> {
        let batch = BatchPredictions::new(probs, labels, self.0.current().num_classes()).map_err(err)?;
        self.0.refine_step(&batch).map_err(err)
    }

    #[getter]
    fn current(&self) -> Lattice {
        Lattice(self.0.current().clone())
    }

    #[getter]
    fn initial(&self) -> Lattice {
        Lattice(self.0.initial().clone())
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau()
    }
}

/// Lattice from predicted probability rows over a labelled set.
#[pyfunction]
#[pyo3(signature = (probs, labels, classes, hard=false))]
fn build_lattice(probs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize, hard: bool) -> PyResult<Lattice> {
    let preds = BatchPredictions::new(probs, labels, classes).map_err(err)?;
    let mode = if hard { Accumulation::Hard } else { Accumulation::Soft };
    lat::build_lattice(&preds, mode).map(Lattice).map_err(err)
}

/// Correlation-aware pair weight for `mu = n_j / n_i`, `phi = s_ij / s_ii`.
#[pyfunction]
#[pyo3(signature = (mu, phi, config=None))]
fn pairwise_weight(mu: f64, phi: f64, config: Option<&str>) -> PyResult<f64> {
    Ok(losses::pairwise_weight(mu, phi, &loss_config(config, None)?))
}

/// Full `C x C` weight table for class counts and a lattice.
#[pyfunction]
#[pyo3(signature = (counts, lattice, config=None))]
fn weight_table(counts: Vec<u64>, lattice: &Lattice, config: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
    let dist = ClassDistribution::new(counts).map_err(err)?;
    let w = losses::weight_table(&dist, &lattice.0, &loss_config(config, None)?).map_err(err)?;
    Ok((0..w.num_classes()).map(|i| w.row(i).to_vec()).collect())
}

#[pyfunction]
fn cross_entropy(eta: Vec<f64>, label: usize) -> PyResult<(f64, Vec<f64>)> {
    losses::cross_entropy(&eta, label).map(pair).map_err(err)
}

/// Per-sample loss of `mode` as `(value, grad wrt logits)`.
///
/// Static modes read `state.initial`, adaptive ones `state.current`.
#[pyfunction]
#[pyo3(signature = (eta, label, counts, state, mode="fgpl-a", config=None))]
fn loss(
    eta: Vec<f64>,
    label: usize,
    counts: Vec<u64>,
    state: &AdaptiveLattice,
    mode: &str,
    config: Option<&str>,
) -> PyResult<(f64, Vec<f64>)> {
    let cfg = loss_config(config, Some(mode))?;
    let dist = ClassDistribution::new(counts).map_err(err)?;
    losses::combined(&eta, label, &dist, &state.0, &cfg).map(pair).map_err(err)
}

/// Mean loss over a batch and the per-sample gradients of that mean.
#[pyfunction]
#[pyo3(signature = (logits, labels, counts, state=None, mode="fgpl-a", config=None))]
fn batch_loss(
    logits: Vec<Vec<f64>>,
    labels: Vec<usize>,
    counts: Vec<u64>,
    state: Option<PyRef<'_, AdaptiveLattice>>,
    mode: &str,
    config: Option<&str>,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let cfg = loss_config(config, Some(mode))?;
    let dist = ClassDistribution::new(counts).map_err(err)?;
    let obj = Objective::new(&cfg, &dist, state.as_deref().map(|s| &s.0)).map_err(err)?;
    obj.batch_loss(&logits, &labels).map_err(err)
}

/// Discriminatory power of a row-normalized confusion matrix at cutoff `k`.
#[pyfunction]
fn dp_at_k(confusion: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let cm = ConfusionMatrix::from_normalized(&confusion).map_err(err)?;
    metrics::dp_at_k(&cm, k).map_err(err)
}

/// Recall, group recall and DP@K as a dict; `counts` defines the frequency groups.
#[pyfunction]
#[pyo3(signature = (probs, labels, counts, dp=None, groups=None))]
fn recall_report<'py>(
    py: Python<'py>,
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    counts: Vec<u64>,
    dp: Option<Vec<usize>>,
    groups: Option<[usize; 3]>,
) -> PyResult<Bound<'py, PyAny>> {
    let dist = ClassDistribution::new(counts).map_err(err)?;
    let preds = BatchPredictions::new(probs, labels, dist.num_classes()).map_err(err)?;
    let cfg = ReportConfig {
        dp_ks: dp,
        group_sizes: groups,
    };
    to_dict(py, &metrics::recall_report(&preds, &dist, &cfg).map_err(err)?)
}

fn spec_from(spec: Option<&str>, seed: Option<u64>) -> PyResult<SyntheticSpec> {
    let mut s = match spec {
        Some(text) => SyntheticSpec::from_json(text).map_err(err)?,
        None => SyntheticSpec::standard(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

/// Synthetic dataset as `(features, contexts, labels)`; the shipped benchmark by default.
#[pyfunction]
#[pyo3(signature = (spec=None, seed=None))]
fn generate(spec: Option<&str>, seed: Option<u64>) -> PyResult<(Vec<Vec<f64>>, Vec<u32>, Vec<usize>)> {
    let spec = spec_from(spec, seed)?;
    let d = data::generate(&spec).map_err(err)?;
    let s = d.samples();
    Ok((
        s.iter().map(|x| x.features.clone()).collect(),
        s.iter().map(|x| x.context).collect(),
        s.iter().map(|x| x.label).collect(),
    ))
}

/// Generates a dataset, trains `mode` (running the CE baseline first when it
/// needs a lattice) and returns the held-out report and the final lattice.
#[pyfunction]
#[pyo3(signature = (mode="fgpl-a", spec=None, config=None, seed=0, epochs=None))]
fn train<'py>(
    py: Python<'py>,
    mode: &str,
    spec: Option<&str>,
    config: Option<&str>,
    seed: u64,
    epochs: Option<usize>,
) -> PyResult<(Bound<'py, PyAny>, Option<Lattice>)> {
    let spec = spec_from(spec, Some(seed))?;
    let mut cfg = match config {
        Some(text) => serde_json::from_str::<TrainConfig>(text).map_err(json_err)?,
        None => TrainConfig::default(),
    };
    cfg.loss.mode = mode.parse().map_err(err)?;
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let result = py
        .detach(|| -> fgpl_core::Result<_> {
            let dataset = data::generate(&spec)?;
            let (tr, ho) = dataset.stratified_split(DEFAULT_HOLDOUT, seed)?;
            experiment::run(&tr, &ho, &cfg, None, &ReportConfig::default())
        })
        .map_err(err)?;
    let lattice = result.final_lattice().cloned().map(Lattice);
    Ok((to_dict(py, &result.report)?, lattice))
}

/// Every benchmark variant on one seed; `{variant: report}`.
#[pyfunction]
#[pyo3(signature = (seed=0, spec=None, epochs=None))]
fn benchmark<'py>(
    py: Python<'py>,
    seed: u64,
    spec: Option<&str>,
    epochs: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = spec_from(spec, None)?;
    let mut cfg = TrainConfig::default();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let res = py
        .detach(|| experiment::benchmark_seed(&spec, &cfg, &experiment::standard_variants(), seed))
        .map_err(err)?;
    let map: std::collections::BTreeMap<_, _> = res.reports.into_iter().collect();
    to_dict(py, &map)
}

#[pymodule]
fn fgpl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lattice>()?;
    m.add_class::<AdaptiveLattice>()?;
    m.add_function(wrap_pyfunction!(build_lattice, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_weight, m)?)?;
    m.add_function(wrap_pyfunction!(weight_table, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(batch_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dp_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(recall_report, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add("MODES", LossMode::ALL.map(LossMode::as_str).to_vec())?;
    Ok(())
}
