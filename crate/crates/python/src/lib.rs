//! Python bindings for the value-probe toolkit. Structured results are returned as JSON strings
//! (the same documents the CLI writes), so callers decode them with `json.loads`.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use value_probe::fusion::{self, FusionConfig, KMeansConfig, NmiNormalization, Points};
use value_probe::probers::{self, CorefTaskConfig, FeatureKind, RelationTaskConfig, Task, TrainConfig};
use value_probe::report;
use value_probe::stats::{self, Direction, PairStatsOptions};
use value_probe::synth::{self, SynthConfig};
use value_probe::trace::{self, TraceDataset};

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(runtime_err)
}

/// Parses an optional JSON config, falling back to the type's defaults.
fn config<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(value_err),
        None => Ok(T::default()),
    }
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

/// An in-memory VTF trace dataset.
#[pyclass(module = "value_probe_py", frozen)]
struct Dataset {
    inner: TraceDataset,
}

#[pymethods]
impl Dataset {
    /// Loads a VTF trace directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        trace::load_dataset(path).map(|inner| Dataset { inner }).map_err(runtime_err)
    }

    /// Writes the dataset as a VTF trace directory.
    fn write(&self, path: &str) -> PyResult<()> {
        trace::write_dataset(&self.inner, path).map(|_| ()).map_err(runtime_err)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(samples={}, architecture={:?})", self.inner.samples.len(), self.inner.model.architecture)
    }

    /// Sample ids in canonical (sorted) order.
    fn sample_ids(&self) -> Vec<String> {
        self.inner.canonical_order().into_iter().map(|i| self.inner.samples[i].id().to_string()).collect()
    }

    /// Model descriptor as JSON.
    fn model(&self) -> PyResult<String> {
        to_json(&self.inner.model)
    }

    /// Validation violations as JSON (an empty list means the dataset is valid).
    fn validate(&self) -> PyResult<String> {
        to_json(&trace::validate_dataset(&self.inner).violations)
    }
}

/// Normalized mutual information between two labelings.
#[pyfunction]
#[pyo3(signature = (a, b, normalization = "arithmetic"))]
fn nmi(a: Vec<usize>, b: Vec<usize>, normalization: &str) -> PyResult<f64> {
    let norm: NmiNormalization = serde_json::from_value(normalization.into()).map_err(value_err)?;
    fusion::nmi(&a, &b, norm).map_err(value_err)
}

/// Seeded 2-means; returns `(labels, inertia)`.
#[pyfunction]
#[pyo3(signature = (rows, seed = 0, config = None))]
fn kmeans2(rows: Vec<Vec<f64>>, seed: u64, config: Option<&str>) -> PyResult<(Vec<usize>, f64)> {
    let cfg: KMeansConfig = self::config(config)?;
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
    }
    let result = fusion::kmeans2(&Points::from_rows(&rows), seed, &cfg).map_err(value_err)?;
    Ok((result.labels.into_iter().map(usize::from).collect(), result.inertia))
}

/// Per-layer fusion degree (mean NMI) as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, layers = None, seed = 0, config = None))]
fn fusion_degree(dataset: &Dataset, layers: Option<Vec<i32>>, seed: u64, config: Option<&str>) -> PyResult<String> {
    let cfg: FusionConfig = self::config(config)?;
    let result = fusion::fusion_degree(&dataset.inner, layers.as_deref(), seed, &cfg).map_err(runtime_err)?;
    to_json(&result)
}

/// Modality Importance heatmaps as JSON.
#[pyfunction]
fn mi_aggregate(dataset: &Dataset) -> PyResult<String> {
    to_json(&stats::mi_aggregate(&dataset.inner).map_err(runtime_err)?)
}

/// Image-to-text head probabilities as JSON.
#[pyfunction]
fn image_to_text_heads(dataset: &Dataset) -> PyResult<String> {
    to_json(&stats::image_to_text_heads(&dataset.inner).map_err(runtime_err)?)
}

/// Coreference head table for direction `"vt"` or `"tv"` as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, direction = "vt", baseline = true, seed = 0, draws = 1))]
fn coref_head_stats(dataset: &Dataset, direction: &str, baseline: bool, seed: u64, draws: usize) -> PyResult<String> {
    let dir: Direction = parse(direction)?;
    let opts = PairStatsOptions { baseline, seed, draws, ..PairStatsOptions::default() };
    to_json(&stats::coref_head_stats(&dataset.inner, dir, &opts).map_err(runtime_err)?)
}

/// Relation head table keyed by predicate as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, baseline = true, seed = 0, draws = 1))]
fn relation_head_stats(dataset: &Dataset, baseline: bool, seed: u64, draws: usize) -> PyResult<String> {
    let opts = PairStatsOptions { baseline, seed, draws, ..PairStatsOptions::default() };
    to_json(&stats::relation_head_stats(&dataset.inner, &opts).map_err(runtime_err)?)
}

/// Trains a pair-task prober (`vcd`, `vcc`, `vri`, `vrc`) on attention or embedding features.
/// Returns the outcome (model, log, metrics) as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, task, features = "attention", layer = -1, seed = 0, shuffle_control = false, train_config = None))]
fn train_prober(
    dataset: &Dataset,
    task: &str,
    features: &str,
    layer: i32,
    seed: u64,
    shuffle_control: bool,
    train_config: Option<&str>,
) -> PyResult<String> {
    let task: Task = parse(task)?;
    let kind = match features {
        "attention" => FeatureKind::Attention,
        "embedding" => FeatureKind::Embedding { layer },
        other => return Err(PyValueError::new_err(format!("features must be attention or embedding, got {other:?}"))),
    };
    let cfg: TrainConfig = config(train_config)?;
    let data = probers::build_task(
        &dataset.inner,
        task,
        seed,
        &CorefTaskConfig::default(),
        &RelationTaskConfig::default(),
    )
    .map_err(runtime_err)?;
    let outcome =
        probers::train_prober(&dataset.inner, &data, kind, None, &cfg, seed, shuffle_control).map_err(runtime_err)?;
    to_json(&outcome)
}

/// Per-layer sentence probe over `labels` (sample id -> class name) as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, labels, layers, seed = 0, train_config = None))]
fn sentence_probe(
    dataset: &Dataset,
    labels: BTreeMap<String, String>,
    layers: Vec<i32>,
    seed: u64,
    train_config: Option<&str>,
) -> PyResult<String> {
    let cfg: TrainConfig = config(train_config)?;
    to_json(&probers::sentence_probe(&dataset.inner, &labels, &layers, &cfg, seed).map_err(runtime_err)?)
}

/// Derangement pairing for the mismatched-annotation control as JSON.
#[pyfunction]
#[pyo3(signature = (dataset, seed = 0))]
fn mismatch(dataset: &Dataset, seed: u64) -> PyResult<String> {
    to_json(&probers::mismatch_dataset(&dataset.inner, seed).map_err(runtime_err)?)
}

/// Generates a synthetic dataset from a JSON config; returns `(dataset, ground_truth_json)`.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn synth_generate(config: Option<&str>) -> PyResult<(Dataset, String)> {
    let cfg: SynthConfig = self::config(config)?;
    let (inner, truth) = synth::generate(&cfg).map_err(value_err)?;
    Ok((Dataset { inner }, to_json(&truth)?))
}

/// Brute-force reference statistics for small datasets as JSON.
#[pyfunction]
fn oracle_stats(dataset: &Dataset) -> PyResult<String> {
    to_json(&synth::oracle::brute_force_stats(&dataset.inner).map_err(value_err)?)
}

/// CSV heatmap with header `layer,h1..hH`.
#[pyfunction]
fn heatmap_csv(matrix: Vec<Vec<f64>>) -> PyResult<String> {
    report::heatmap_csv(&matrix).map_err(value_err)
}

/// SHA-256 fingerprint of a trace directory.
#[pyfunction]
fn trace_fingerprint(path: &str) -> PyResult<String> {
    report::trace_fingerprint(path).map_err(runtime_err)
}

#[pymodule]
fn value_probe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", report::TOOL_VERSION)?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans2, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_degree, m)?)?;
    m.add_function(wrap_pyfunction!(mi_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(image_to_text_heads, m)?)?;
    m.add_function(wrap_pyfunction!(coref_head_stats, m)?)?;
    m.add_function(wrap_pyfunction!(relation_head_stats, m)?)?;
    m.add_function(wrap_pyfunction!(train_prober, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_probe, m)?)?;
    m.add_function(wrap_pyfunction!(mismatch, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_stats, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap_csv, m)?)?;
    m.add_function(wrap_pyfunction!(trace_fingerprint, m)?)?;
    Ok(())
}
