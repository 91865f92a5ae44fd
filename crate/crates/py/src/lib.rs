//! Python bindings: text utilities, metrics, fixture generation, training
//! and an in-process conversational service.
//!
//! Structured results cross the boundary as plain dicts and lists.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use revcore::corpus::fixture::FixtureConfig;
use revcore::metrics;
use revcore::pipeline::{self, RunConfig};
use revcore::sentiment;
use revcore::service::{Engine, ServiceError, SessionManager, DEFAULT_TOP_K};

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn service_err(e: ServiceError) -> PyErr {
    match e {
        ServiceError::UnknownSession(_) => PyKeyError::new_err(e.to_string()),
        ServiceError::EmptyText | ServiceError::BadRequest(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn load_config(path: &str) -> PyResult<RunConfig> {
    RunConfig::load(Path::new(path)).map_err(runtime)
}

/// Lowercased word tokens; `@m12` style item placeholders stay whole.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    revcore::corpus::tokenize(text)
}

/// `"positive"` or `"negative"` for a 1-10 star rating.
#[pyfunction]
fn label_from_rating(py: Python<'_>, rating: i64) -> PyResult<Bound<'_, PyAny>> {
    let p = sentiment::label_from_rating(rating).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &p)
}

/// Parses a retrieval strategy code such as `"C-S-W"` or `"iCorpus"`.
#[pyfunction]
#[pyo3(signature = (code, budget = 20))]
fn parse_strategy<'py>(py: Python<'py>, code: &str, budget: usize) -> PyResult<Bound<'py, PyAny>> {
    let (s, source) = pipeline::parse_strategy(code, budget).map_err(|e| PyValueError::new_err(e.to_string()))?;
    #[derive(Serialize)]
    struct View<'a> {
        code: String,
        #[serde(flatten)]
        strategy: &'a revcore::retrieval::RetrievalStrategy,
        source: &'static str,
    }
    to_py(
        py,
        &View {
            code: s.code(),
            strategy: &s,
            source: match source {
                pipeline::ReviewSource::Items => "items",
                pipeline::ReviewSource::Irrelevant => "irrelevant",
            },
        },
    )
}

#[pyfunction]
fn recall_at_k(ranked: Vec<Vec<usize>>, targets: Vec<usize>, k: usize) -> PyResult<f64> {
    if ranked.len() != targets.len() || k == 0 {
        return Err(PyValueError::new_err("need one ranked list per target and k >= 1"));
    }
    Ok(metrics::recall_at_k(&ranked, &targets, k))
}

#[pyfunction]
fn distinct_n(sentences: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
    if n == 0 {
        return Err(PyValueError::new_err("n must be >= 1"));
    }
    Ok(metrics::distinct_n(&sentences, n))
}

/// Per-turn lists of target-token probabilities.
#[pyfunction]
fn perplexity(token_probs: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::perplexity(&token_probs).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn gen_loss(token_probs: Vec<Vec<f64>>) -> f64 {
    metrics::gen_loss(&token_probs)
}

#[pyfunction]
fn rec_loss(predictions: Vec<Vec<f64>>, targets: Vec<usize>) -> PyResult<f64> {
    metrics::rec_loss(&predictions, &targets).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Writes a synthetic corpus and a matching `config.toml` into `out`;
/// returns the config path.
#[pyfunction]
#[pyo3(signature = (out, seed = 42, dialogues = 20))]
fn write_fixture(out: PathBuf, seed: u64, dialogues: usize) -> PyResult<PathBuf> {
    let fixture = FixtureConfig {
        seed,
        dialogues,
        ..FixtureConfig::default()
    };
    pipeline::scaffold_fixture(&out, &fixture).map_err(runtime)
}

/// Runs the configured training stages; returns the metrics report.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(config)?;
    let outcome = py.detach(|| pipeline::train_all(&cfg)).map_err(runtime)?;
    to_py(py, &outcome.metrics)
}

/// Scores existing checkpoints without training.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(config)?;
    let report = py.detach(|| pipeline::evaluate(&cfg)).map_err(runtime)?;
    to_py(py, &report)
}

/// Conversational sessions over trained checkpoints, without HTTP.
#[pyclass(frozen)]
struct Service {
    manager: Arc<SessionManager>,
}

#[pymethods]
impl Service {
    #[new]
    #[pyo3(signature = (config, checkpoints = None, top_k = DEFAULT_TOP_K))]
    fn new(py: Python<'_>, config: &str, checkpoints: Option<PathBuf>, top_k: usize) -> PyResult<Self> {
        let cfg = load_config(config)?;
        let engine = py
            .detach(|| Engine::load(&cfg, checkpoints.as_deref(), top_k))
            .map_err(runtime)?;
        Ok(Self {
            manager: Arc::new(SessionManager::new(Arc::new(engine))),
        })
    }

    fn open(&self) -> String {
        self.manager.open()
    }

    /// `{"response", "recommendations", "reviews"}` for one seeker message.
    fn step<'py>(&self, py: Python<'py>, session: &str, text: &str) -> PyResult<Bound<'py, PyAny>> {
        let reply = py.detach(|| self.manager.step(session, text)).map_err(service_err)?;
        to_py(py, &reply)
    }

    #[pyo3(signature = (session, k = None))]
    fn recommendations<'py>(&self, py: Python<'py>, session: &str, k: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let k = k.unwrap_or_else(|| self.manager.engine().top_k());
        let recs = self.manager.recommendations(session, k).map_err(service_err)?;
        to_py(py, &recs)
    }

    fn __len__(&self) -> usize {
        self.manager.len()
    }
}

#[pymodule]
fn revcore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(label_from_rating, m)?)?;
    m.add_function(wrap_pyfunction!(parse_strategy, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(gen_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rec_loss, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Service>()?;
    Ok(())
}
