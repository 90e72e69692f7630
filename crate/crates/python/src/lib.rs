//! Python bindings: datasets, the model registry, cross-validation, grid
//! search and the synthetic generators.
//!
//! Structured results (reports, summaries, exported models) come back as
//! plain dicts built from the same JSON the command line writes.

use std::path::PathBuf;
use std::sync::Arc;

use learnkt_core::llm::pipeline::llm_cross_validate as core_llm_cv;
use learnkt_core::llm::{LlmClient, MockClient, PipelineConfig};
use learnkt_core::metrics::{format_cell as core_format_cell, reports_to_json};
use learnkt_core::registry::{build_predictor, is_llm_model, MODEL_REGISTRY};
use learnkt_core::simgen::{self, FactorInit, Generator, SimSpec};
use learnkt_core::tuner::Grid;
use learnkt_core::{bkt::BktParams, data, Dataset, Error, ErrorKind, FittedModel, InteractionRecord, Predictor, RecordKey};
use pyo3::exceptions::{PyConnectionError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    if matches!(e, Error::Io { .. }) {
        return PyOSError::new_err(msg);
    }
    match e.kind() {
        ErrorKind::Usage | ErrorKind::Data => PyValueError::new_err(msg),
        ErrorKind::Model => PyRuntimeError::new_err(msg),
        ErrorKind::Client => PyConnectionError::new_err(msg),
    }
}

fn to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn keys_from(items: Vec<(String, String, u32)>) -> Vec<RecordKey> {
    items.into_iter().map(|(l, q, a)| RecordKey::new(l, q, a)).collect()
}

#[pyclass(name = "Dataset", module = "learnkt", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Reads an interaction CSV, with an optional metadata JSON.
    #[staticmethod]
    #[pyo3(signature = (path, meta=None))]
    fn load(path: PathBuf, meta: Option<PathBuf>) -> PyResult<Self> {
        let inner = learnkt_core::parse_dataset(&path, meta.as_deref()).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Builds a dataset from `(learner, question, attempt, obs)` tuples;
    /// `obs` is True, False or None for an unobserved row.
    #[staticmethod]
    #[pyo3(signature = (records, lesson_name="lesson"))]
    fn from_records(records: Vec<(String, String, u32, Option<bool>)>, lesson_name: &str) -> PyResult<Self> {
        let recs = records
            .into_iter()
            .map(|(l, q, a, o)| InteractionRecord::new(l, q, a, o))
            .collect();
        Ok(Self {
            inner: Dataset::new(recs, lesson_name).map_err(py_err)?,
        })
    }

    #[getter]
    fn lesson_name(&self) -> String {
        self.inner.lesson_name().to_string()
    }

    #[getter]
    fn n_learners(&self) -> usize {
        self.inner.n_learners()
    }

    #[getter]
    fn n_questions(&self) -> usize {
        self.inner.n_questions()
    }

    #[getter]
    fn max_attempt(&self) -> u32 {
        self.inner.max_attempt()
    }

    #[getter]
    fn n_labeled(&self) -> usize {
        self.inner.n_labeled()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset('{}', records={}, learners={}, questions={}, max_attempt={})",
            self.inner.lesson_name(),
            self.inner.len(),
            self.inner.n_learners(),
            self.inner.n_questions(),
            self.inner.max_attempt()
        )
    }

    /// Only the rows with an observed outcome.
    fn labeled(&self) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.labeled().map_err(py_err)?,
        })
    }

    fn keys(&self) -> Vec<(String, String, u32)> {
        self.inner
            .keys()
            .into_iter()
            .map(|k| (k.learner_id, k.question_id, k.attempt))
            .collect()
    }

    fn targets(&self) -> Vec<Option<f64>> {
        self.inner.records().iter().map(InteractionRecord::target).collect()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv_string()
    }

    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = serde_json::to_value(data::summarize(&self.inner)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        to_py(py, &s)
    }
}

#[pyclass(name = "FittedModel", module = "learnkt")]
struct PyFitted {
    inner: Box<dyn FittedModel>,
}

#[pymethods]
impl PyFitted {
    /// P(correct) for each `(learner, question, attempt)`.
    fn predict(&self, py: Python<'_>, keys: Vec<(String, String, u32)>) -> PyResult<Vec<f64>> {
        let keys = keys_from(keys);
        py.detach(|| self.inner.predict(&keys)).map_err(py_err)
    }

    /// Parameters in the model's export format.
    fn export(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.export())
    }
}

/// A registry model: bkt, pfa, sparfa, tensor, gbt, llm or llm-gbt.
/// LLM models run with the offline mock client only.
#[pyclass(name = "Model", module = "learnkt")]
struct PyModel {
    key: String,
    inner: Box<dyn Predictor>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (name, settings=None, mock=false, seed=0))]
    fn new(py: Python<'_>, name: &str, settings: Option<&Bound<'_, PyDict>>, mock: bool, seed: u64) -> PyResult<Self> {
        let mut overrides = Vec::new();
        if let Some(d) = settings {
            let json = py.import("json")?;
            for (k, v) in d.iter() {
                let text: String = json.call_method1("dumps", (v,))?.extract()?;
                overrides.push((k.extract::<String>()?, text));
            }
        }
        let client: Option<Arc<dyn LlmClient>> = if is_llm_model(name) {
            if !mock {
                return Err(PyValueError::new_err(
                    "LLM models need mock=True here; use the command line for network clients",
                ));
            }
            Some(Arc::new(MockClient::new(seed)))
        } else {
            None
        };
        let inner = build_predictor(name, &overrides, client).map_err(py_err)?;
        Ok(Self { key: name.to_string(), inner })
    }

    /// Display name used in reports, e.g. "BKT".
    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    fn __repr__(&self) -> String {
        format!("Model('{}')", self.key)
    }

    #[pyo3(signature = (dataset, seed=0))]
    fn fit(&self, py: Python<'_>, dataset: &PyDataset, seed: u64) -> PyResult<PyFitted> {
        let inner = py.detach(|| self.inner.fit(&dataset.inner, seed)).map_err(py_err)?;
        Ok(PyFitted { inner })
    }

    /// k-fold CV report: `{model, dataset, fold_rmse, mean, se, cell}`.
    #[pyo3(signature = (dataset, k=5, seed=0))]
    fn cross_validate(&self, py: Python<'_>, dataset: &PyDataset, k: usize, seed: u64) -> PyResult<Py<PyAny>> {
        let r = py
            .detach(|| learnkt_core::cross_validate(self.inner.as_ref(), &dataset.inner, k, seed))
            .map_err(py_err)?;
        let v = serde_json::json!({
            "model": r.model_name,
            "dataset": r.dataset,
            "fold_rmse": r.fold_rmse,
            "mean": r.mean_rmse,
            "se": r.std_error,
            "cell": r.cell(),
        });
        to_py(py, &v)
    }
}

#[pyfunction]
fn rmse(predicted: Vec<f64>, actual: Vec<f64>) -> PyResult<f64> {
    learnkt_core::rmse(&predicted, &actual).map_err(py_err)
}

/// `mean_{se}` with three decimals, e.g. "0.430_{0.004}".
#[pyfunction]
fn format_cell(mean: f64, se: f64) -> String {
    core_format_cell(mean, se)
}

#[pyfunction]
fn registry() -> Vec<&'static str> {
    MODEL_REGISTRY.to_vec()
}

#[pyfunction]
fn default_grid_size() -> usize {
    Grid::default().len()
}

/// Generates a synthetic lesson; returns `(dataset, sidecar)` where the
/// sidecar holds the generating parameters and held-out outcomes.
#[pyfunction]
#[pyo3(signature = (generator="bkt-process", shape="66x8x9", seed=0, holdout=0.0, rank=2, scale=1.0, bkt_params=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    generator: &str,
    shape: &str,
    seed: u64,
    holdout: f64,
    rank: usize,
    scale: f64,
    bkt_params: Option<(f64, f64, f64, f64)>,
) -> PyResult<(PyDataset, Py<PyAny>)> {
    let (n_learners, n_questions, max_attempt) = simgen::parse_shape(shape).map_err(py_err)?;
    let generator = match generator {
        "bkt-process" => {
            let (a, b, c, d) = bkt_params.unwrap_or((0.3, 0.2, 0.1, 0.25));
            Generator::BktProcess {
                params: vec![BktParams::new(a, b, c, d).map_err(py_err)?],
                policy: Default::default(),
            }
        }
        "low-rank-matrix" => Generator::LowRankMatrix {
            rank,
            factors: FactorInit::Random { scale },
            intercept_scale: 0.5,
        },
        "low-rank-tensor" => Generator::LowRankTensor {
            rank,
            factors: FactorInit::Random { scale },
        },
        other => return Err(PyValueError::new_err(format!("unknown generator '{other}'"))),
    };
    let spec = SimSpec {
        lesson_name: "simulated".into(),
        n_learners,
        n_questions,
        max_attempt,
        generator,
        holdout_fraction: holdout,
        seed,
    };
    let out = simgen::simulate(&spec).map_err(py_err)?;
    let sidecar = to_py(py, &out.sidecar_json())?;
    Ok((PyDataset { inner: out.dataset }, sidecar))
}

/// Grid search for GBT. `grid` maps axis names to lists of values and
/// replaces those axes of the default 1,296-point grid.
#[pyfunction]
#[pyo3(signature = (dataset, k=5, seed=0, grid=None))]
fn grid_search(py: Python<'_>, dataset: &PyDataset, k: usize, seed: u64, grid: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    let mut g = Grid::default();
    if let Some(d) = grid {
        for (key, values) in d.iter() {
            let key: String = key.extract()?;
            let values: Vec<f64> = values.extract()?;
            let text = values.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
            g.set(&key, &text).map_err(py_err)?;
        }
    }
    let report = py
        .detach(|| learnkt_core::tuner::grid_search(&dataset.inner, &g, k, seed))
        .map_err(py_err)?;
    to_py(py, &serde_json::to_value(report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// Cross-validates the direct LLM pipeline with the offline mock client.
#[pyfunction]
#[pyo3(signature = (dataset, k=5, seed=0, repeats=1))]
fn llm_cross_validate(py: Python<'_>, dataset: &PyDataset, k: usize, seed: u64, repeats: usize) -> PyResult<Py<PyAny>> {
    let client = MockClient::new(seed);
    let cfg = PipelineConfig {
        repeats,
        ..Default::default()
    };
    let (report, outcomes) = py
        .detach(|| core_llm_cv(&dataset.inner, &client, k, seed, &cfg))
        .map_err(py_err)?;
    let mut v = serde_json::to_value(reports_to_json(std::slice::from_ref(&report)))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    v["imputed"] = outcomes.iter().map(|o| o.total_imputed()).sum::<usize>().into();
    v["cell"] = report.cell().into();
    to_py(py, &v)
}

#[pymodule]
pub fn learnkt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFitted>()?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(format_cell, m)?)?;
    m.add_function(wrap_pyfunction!(registry, m)?)?;
    m.add_function(wrap_pyfunction!(default_grid_size, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    m.add_function(wrap_pyfunction!(llm_cross_validate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
