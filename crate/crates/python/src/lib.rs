//! Python bindings: quartiles, prompt rendering, SAE encoding and pooling,
//! tree probes, and the full pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use monoprobe_core::corpus::{quartiles_from_values, Label, PaperRecord, QualityMetric};
use monoprobe_core::featurize::{self, PaperFeatureVector, ReferenceSaeWeights, SaeConfig, SparseRow, TokenFeatureMatrix};
use monoprobe_core::interpret::feature_importances;
use monoprobe_core::pipeline::{Pipeline, RunConfig, Stage};
use monoprobe_core::probe::{self, TreeConfig};
use monoprobe_core::summarize::{self, PromptConfig, PromptVariant};
use monoprobe_core::synthetic::{SyntheticCorpus, SyntheticSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_label(s: &str) -> PyResult<Label> {
    match s {
        "High" | "high" => Ok(Label::High),
        "Low" | "low" => Ok(Label::Low),
        other => Err(PyValueError::new_err(format!("label must be High or Low, got {other:?}"))),
    }
}

fn parse_stage(s: &str) -> PyResult<Stage> {
    Stage::ALL
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown stage {s:?}")))
}

/// Rank quartiles (`"Q1"` highest) for `{id: value}`.
#[pyfunction]
fn quartiles(values: BTreeMap<String, f64>) -> PyResult<BTreeMap<String, String>> {
    let pairs: Vec<(String, f64)> = values.into_iter().collect();
    let q = quartiles_from_values(QualityMetric::CitationCount, &pairs).map_err(value_err)?;
    Ok(q.into_iter().map(|(id, label)| (id, format!("{label:?}"))).collect())
}

#[pyfunction]
#[pyo3(signature = (title, abstract_text, template = None, variant = "instruction_tuned"))]
fn render_prompt(title: &str, abstract_text: &str, template: Option<&str>, variant: &str) -> PyResult<String> {
    let variant = match variant {
        "instruction_tuned" => PromptVariant::InstructionTuned,
        "base_completion" => PromptVariant::BaseCompletion,
        other => return Err(PyValueError::new_err(format!("unknown prompt variant {other:?}"))),
    };
    let config = PromptConfig::new(variant, template.unwrap_or(variant.default_template())).map_err(value_err)?;
    let paper = PaperRecord {
        paper_id: "python".into(),
        title: title.into(),
        abstract_text: abstract_text.into(),
        citation_count_5y: 0,
        venue_id: String::new(),
    };
    summarize::render_prompt(&paper, &config).map_err(value_err)
}

/// JumpReLU encoding of one hidden state with `w_enc` given as F rows of D.
#[pyfunction]
fn sae_encode(w_enc: Vec<Vec<f64>>, b_enc: Vec<f64>, theta: Vec<f64>, hidden: Vec<f64>) -> PyResult<Vec<f64>> {
    let weights = ReferenceSaeWeights::from_rows(&w_enc, b_enc, theta).map_err(value_err)?;
    featurize::sae_encode(&weights, &hidden).map_err(value_err)
}

/// Mean over token rows of a dense `T × F` activation matrix.
#[pyfunction]
fn pool_features(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must be non-empty and of equal length"));
    }
    let matrix = TokenFeatureMatrix {
        paper_id: "python".into(),
        sae: python_space(width)?,
        tokens: vec![String::new(); rows.len()],
        rows: rows.iter().map(|r| SparseRow::from_dense(r)).collect(),
    };
    Ok(featurize::pool_features(&matrix).map_err(value_err)?.values)
}

fn python_space(width: usize) -> PyResult<SaeConfig> {
    SaeConfig::new("python", 0, width, "python").map_err(value_err)
}

/// A trained decision-tree probe over dense feature rows.
#[pyclass(name = "TreeProbe", module = "monoprobe")]
struct PyTreeProbe {
    inner: probe::TreeProbe,
}

#[pymethods]
impl PyTreeProbe {
    #[staticmethod]
    #[pyo3(signature = (x, y, max_leaf_nodes = 2))]
    fn train(x: Vec<Vec<f64>>, y: Vec<String>, max_leaf_nodes: usize) -> PyResult<Self> {
        let width = x.first().map_or(0, Vec::len);
        let sae = python_space(width.max(1))?;
        let vectors: Vec<PaperFeatureVector> = x
            .into_iter()
            .enumerate()
            .map(|(i, values)| PaperFeatureVector { paper_id: i.to_string(), sae: sae.clone(), values })
            .collect();
        let labels = y.iter().map(|s| parse_label(s)).collect::<PyResult<Vec<_>>>()?;
        if labels.len() != vectors.len() {
            return Err(PyValueError::new_err("x and y differ in length"));
        }
        let train: Vec<_> = vectors.iter().zip(labels).collect();
        let config = TreeConfig::default().with_max_leaf_nodes(max_leaf_nodes);
        let inner = probe::train_tree(&train, &config, QualityMetric::CitationCount).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: probe::TreeProbe::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(value_err)
    }

    fn predict(&self, row: Vec<f64>) -> PyResult<String> {
        if row.len() != self.inner.sae.feature_count {
            return Err(PyValueError::new_err(format!("expected {} features", self.inner.sae.feature_count)));
        }
        Ok(self.inner.predict_values(&row).to_string())
    }

    /// Normalised impurity-decrease importance per split feature.
    fn importances(&self) -> BTreeMap<usize, f64> {
        feature_importances(&self.inner)
    }

    #[getter]
    fn leaf_count(&self) -> usize {
        self.inner.leaf_count()
    }

    fn __repr__(&self) -> String {
        format!("TreeProbe(leaves={}, features={:?})", self.inner.leaf_count(), self.inner.used_features())
    }
}

/// Writes `papers.jsonl` and `venues.jsonl` with a planted trigger-word signal.
#[pyfunction]
#[pyo3(signature = (directory, papers = 200, seed = 0))]
fn synthesize_corpus(directory: PathBuf, papers: usize, seed: u64) -> PyResult<()> {
    let synth = SyntheticCorpus::generate(&SyntheticSpec { papers, seed, ..Default::default() });
    let write = |name: &str, text: String| std::fs::write(directory.join(name), text);
    std::fs::create_dir_all(&directory)
        .and_then(|_| write("papers.jsonl", synth.papers_jsonl()))
        .and_then(|_| write("venues.jsonl", synth.venues_jsonl()))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs a TOML run file through `until` and returns the run statistics.
#[pyfunction]
#[pyo3(signature = (config_path, until = "report"))]
fn run_pipeline(py: Python<'_>, config_path: PathBuf, until: &str) -> PyResult<Py<PyAny>> {
    let stage = parse_stage(until)?;
    let config = RunConfig::load(&config_path).map_err(value_err)?;
    let pipeline = Pipeline::new(config).map_err(value_err)?;
    let outcome = py.detach(|| pipeline.run_until(stage)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let text = serde_json::to_string(&outcome.stats).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pymodule]
fn monoprobe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quartiles, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(sae_encode, m)?)?;
    m.add_function(wrap_pyfunction!(pool_features, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<PyTreeProbe>()?;
    Ok(())
}
