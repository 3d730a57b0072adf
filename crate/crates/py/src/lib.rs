//! Python bindings: retrieval metrics, re-ranking, the triplet loss, the
//! gradient suite, checkpoint embedding and the command-line runner.
//!
//! Matrices cross the boundary as lists of rows of floats.

use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use serde_json::Value;

use trackrank::cli::{self, Cli};
use trackrank::gradient_suite::{run_suite, DEFAULT_SEEDS, DEFAULT_TOLERANCE};
use trackrank::losses::{LabeledBatch, Reduction, TripletConfig};
use trackrank::model::Model;
use trackrank::retrieval::{self, Meta, RerankConfig, DEFAULT_RANKS};
use trackrank::sampling::Tracklet;
use trackrank::tensor::Tensor;
use trackrank::trainer::Checkpoint as CoreCheckpoint;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

pub fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

fn metas(pairs: &[(usize, usize)]) -> Vec<Meta> {
    pairs
        .iter()
        .map(|&(identity, camera)| Meta { identity, camera })
        .collect()
}

/// Converts a JSON value into the matching Python object.
pub fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// Pairwise Euclidean distances between query and gallery rows.
#[pyfunction]
fn distance_matrix(queries: Vec<Vec<f64>>, gallery: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let d = retrieval::distance_matrix(&matrix(&queries)?, &matrix(&gallery)?).map_err(err)?;
    Ok(rows(&d))
}

/// mAP and CMC under the cross-camera protocol. Metadata entries are
/// `(identity, camera)` pairs.
#[pyfunction]
#[pyo3(signature = (distances, queries, gallery, ranks = None))]
fn evaluate<'py>(
    py: Python<'py>,
    distances: Vec<Vec<f64>>,
    queries: Vec<(usize, usize)>,
    gallery: Vec<(usize, usize)>,
    ranks: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyAny>> {
    let result = retrieval::evaluate(&matrix(&distances)?, &metas(&queries), &metas(&gallery)).map_err(err)?;
    let ranks = ranks.unwrap_or_else(|| DEFAULT_RANKS.to_vec());
    let report = result.report(&ranks, 0.0);
    let mut v = serde_json::to_value(&report).map_err(err)?;
    v["average_precision"] = serde_json::to_value(&result.average_precision).map_err(err)?;
    if let Value::Object(m) = &mut v {
        m.remove("runtime_secs");
    }
    to_py(py, &v)
}

/// k-reciprocal re-ranking of a query-gallery distance matrix.
#[pyfunction]
#[pyo3(signature = (q_g, q_q, g_g, k1 = 20, k2 = 6, lambda_ = 0.3))]
fn rerank(
    q_g: Vec<Vec<f64>>,
    q_q: Vec<Vec<f64>>,
    g_g: Vec<Vec<f64>>,
    k1: usize,
    k2: usize,
    lambda_: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = RerankConfig {
        k1,
        k2,
        lambda: lambda_,
    };
    let out = retrieval::rerank(&matrix(&q_g)?, &matrix(&q_q)?, &matrix(&g_g)?, &cfg).map_err(err)?;
    Ok(rows(&out))
}

/// Batch-hard triplet loss of a P×K batch.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, margin = 0.3, reduction = "mean"))]
fn batch_hard_triplet(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, margin: f64, reduction: &str) -> PyResult<f64> {
    let reduction = match reduction {
        "mean" => Reduction::Mean,
        "sum" => Reduction::Sum,
        other => return Err(err(format!("reduction must be \"mean\" or \"sum\", got {other:?}"))),
    };
    let cfg = TripletConfig { margin, reduction };
    LabeledBatch::new(matrix(&embeddings)?, labels)
        .and_then(|b| b.triplet(&cfg))
        .map_err(err)
}

/// Finite-difference checks; one dict per row.
#[pyfunction]
#[pyo3(signature = (rows = None, seeds = DEFAULT_SEEDS, tolerance = DEFAULT_TOLERANCE))]
fn gradcheck<'py>(
    py: Python<'py>,
    rows: Option<Vec<String>>,
    seeds: usize,
    tolerance: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| run_suite(rows.as_deref(), seeds, tolerance));
    to_py(py, &serde_json::to_value(out).map_err(err)?)
}

/// Runs a `trackrank` subcommand, e.g. `run(["train", "--out", "runs/a"])`,
/// and returns its JSON report. Raises when the command fails or its checks
/// do not pass.
#[pyfunction]
fn run<'py>(py: Python<'py>, args: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let argv = std::iter::once("trackrank".to_string()).chain(args);
    let parsed = Cli::try_parse_from(argv).map_err(err)?;
    let report = py.detach(|| cli::run(&parsed)).map_err(err)?;
    if !report.success {
        return Err(err(report.text));
    }
    to_py(py, &report.json)
}

/// A trained model loaded from disk.
#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
    model: Model,
}

#[pymethods]
impl Checkpoint {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        let inner = CoreCheckpoint::load(&path).map_err(err)?;
        let model = inner.model().map_err(err)?;
        Ok(Self { inner, model })
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.meta.step
    }

    #[getter]
    fn head(&self) -> String {
        self.inner.meta.config.model.head.label()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.model.embedding_dim()
    }

    /// Video embedding of one tracklet given as flattened frames.
    fn embed(&self, py: Python<'_>, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let f = self.model.frame();
        let mut shape = vec![frames.len()];
        if f.width * f.height > 1 {
            shape.extend([f.width, f.height]);
        }
        shape.push(f.channels);
        if frames.iter().any(|r| r.len() != f.len()) {
            return Err(err(format!("every frame must have {} values", f.len())));
        }
        let data = frames.concat();
        let tensor = Tensor::new(shape, data).map_err(err)?;
        let tracklet = Tracklet::new(0, 0, tensor).map_err(err)?;
        let t = self.inner.meta.config.sampler.t;
        py.detach(|| self.model.embed_tracklet(&self.inner.params, &tracklet, t, false))
            .map(|e| e.vector)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(head={:?}, step={})", self.head(), self.step())
    }
}

#[pymodule]
#[pyo3(name = "pytrackrank")]
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(distance_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(batch_hard_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
