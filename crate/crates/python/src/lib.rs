//! Python bindings: `import pymatkg`.

use std::collections::{BTreeMap, HashMap};

use matkg_core::extract;
use matkg_core::graph::{self, Triplet};
use matkg_core::ingest::{self, NormalizationPolicy, TextFormat};
use matkg_core::prompt;
use matkg_core::rouge::{self, RougeScore};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type Score = (f64, f64, f64);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn policy(strip: Option<&str>, lowercase: bool, collapse_whitespace: bool) -> NormalizationPolicy {
    let mut p = NormalizationPolicy { lowercase, collapse_whitespace, ..NormalizationPolicy::default() };
    if let Some(chars) = strip {
        p.strip_punctuation = chars.chars().collect();
    }
    p
}

fn score(s: RougeScore) -> Score {
    (s.precision, s.recall, s.f1)
}

/// Normalizes text; `strip` lists the punctuation to delete (default `.,;`).
#[pyfunction]
#[pyo3(signature = (text, strip=None, lowercase=true, collapse_whitespace=true))]
fn normalize_text(text: &str, strip: Option<&str>, lowercase: bool, collapse_whitespace: bool) -> String {
    ingest::normalize_text(text, &policy(strip, lowercase, collapse_whitespace))
}

#[pyfunction]
#[pyo3(signature = (text, strip=None, lowercase=true, collapse_whitespace=true))]
fn tokenize(text: &str, strip: Option<&str>, lowercase: bool, collapse_whitespace: bool) -> Vec<String> {
    rouge::tokenize(text, &policy(strip, lowercase, collapse_whitespace))
}

/// ROUGE-N as `(precision, recall, f1)`.
#[pyfunction]
#[pyo3(signature = (reference, candidate, n, strip=None, lowercase=true, collapse_whitespace=true))]
fn rouge_n(reference: &str, candidate: &str, n: usize, strip: Option<&str>, lowercase: bool, collapse_whitespace: bool) -> PyResult<Score> {
    if n == 0 {
        return Err(err("n must be at least 1"));
    }
    let p = policy(strip, lowercase, collapse_whitespace);
    Ok(score(rouge::ngram_rouge(&rouge::tokenize(reference, &p), &rouge::tokenize(candidate, &p), n)))
}

#[pyfunction]
#[pyo3(signature = (reference, candidate, strip=None, lowercase=true, collapse_whitespace=true))]
fn rouge_l(reference: &str, candidate: &str, strip: Option<&str>, lowercase: bool, collapse_whitespace: bool) -> Score {
    score(rouge::rouge_l(reference, candidate, &policy(strip, lowercase, collapse_whitespace)))
}

#[pyfunction]
#[pyo3(signature = (reference, candidate, strip=None, lowercase=true, collapse_whitespace=true))]
fn rouge_lsum(reference: &str, candidate: &str, strip: Option<&str>, lowercase: bool, collapse_whitespace: bool) -> Score {
    score(rouge::rouge_lsum(reference, candidate, &policy(strip, lowercase, collapse_whitespace)))
}

/// All six scores keyed `rouge1`, `rouge2`, `rougeL`, `rougeLsum`, `exact`, `relaxed`.
#[pyfunction]
#[pyo3(signature = (reference, candidate, strip=None, lowercase=true, collapse_whitespace=true))]
fn match_report(
    reference: &str,
    candidate: &str,
    strip: Option<&str>,
    lowercase: bool,
    collapse_whitespace: bool,
) -> HashMap<&'static str, Score> {
    let m = rouge::match_report(reference, candidate, &policy(strip, lowercase, collapse_whitespace));
    HashMap::from([
        ("rouge1", score(m.rouge1)),
        ("rouge2", score(m.rouge2)),
        ("rougeL", score(m.rouge_l)),
        ("rougeLsum", score(m.rouge_lsum)),
        ("exact", score(m.exact)),
        ("relaxed", score(m.relaxed)),
    ])
}

#[pyfunction]
fn lcs_length(a: Vec<String>, b: Vec<String>) -> usize {
    rouge::lcs_length(&a, &b)
}

#[pyclass(name = "ValueParts", frozen)]
struct PyValueParts {
    #[pyo3(get)]
    numeric_value: Option<f64>,
    #[pyo3(get)]
    uncertainty: Option<f64>,
    #[pyo3(get)]
    unit: Option<String>,
    #[pyo3(get)]
    residual_text: Option<String>,
    text: String,
}

#[pymethods]
impl PyValueParts {
    fn reconstruct(&self) -> String {
        self.text.clone()
    }

    fn __repr__(&self) -> String {
        fn py<T: std::fmt::Debug>(v: &Option<T>) -> String {
            v.as_ref().map_or("None".to_string(), |v| format!("{v:?}"))
        }
        format!(
            "ValueParts(numeric_value={}, uncertainty={}, unit={}, residual_text={})",
            py(&self.numeric_value),
            py(&self.uncertainty),
            py(&self.unit),
            py(&self.residual_text)
        )
    }
}

#[pyfunction]
fn parse_value_unit(cell: &str) -> PyValueParts {
    let parts = extract::parse_value_unit(cell);
    let text = parts.reconstruct();
    PyValueParts {
        numeric_value: parts.numeric_value,
        uncertainty: parts.uncertainty,
        unit: parts.unit,
        residual_text: parts.residual_text,
        text,
    }
}

/// Parses markdown tables from a model answer; returns the tables as JSON.
#[pyfunction]
fn parse_markdown_tables(text: &str) -> PyResult<String> {
    extract::parse_markdown_tables(text).map(|t| extract::records_to_json(&t)).map_err(err)
}

#[pyfunction]
fn normalize_entity(label: &str) -> PyResult<String> {
    graph::normalize_entity(label).map_err(err)
}

/// Parses a paper into the document JSON; `format` is `plain` or `markdown`.
#[pyfunction]
#[pyo3(signature = (text, format="markdown"))]
fn parse_document(text: &str, format: &str) -> PyResult<String> {
    let format = match format {
        "markdown" | "md" => TextFormat::Markdown,
        "plain" | "txt" => TextFormat::Plain,
        other => return Err(err(format!("unknown format `{other}`"))),
    };
    let doc = ingest::parse_document(text, format).map_err(err)?;
    serde_json::to_string_pretty(&doc).map_err(err)
}

#[pyfunction]
fn template_names() -> Vec<String> {
    prompt::builtin_templates().iter().map(|t| t.name().to_string()).collect()
}

/// Renders a built-in template (or a template file path) around `input_text`.
#[pyfunction]
#[pyo3(signature = (name, input_text, variables=None))]
fn render_template(name: &str, input_text: &str, variables: Option<BTreeMap<String, String>>) -> PyResult<String> {
    let template = prompt::resolve_template(name, None).map_err(err)?;
    let rendered = template.render(input_text, &variables.unwrap_or_default()).map_err(err)?;
    Ok(rendered.text)
}

#[pyclass(name = "KnowledgeGraph")]
struct PyKnowledgeGraph {
    inner: graph::KnowledgeGraph,
}

#[pymethods]
impl PyKnowledgeGraph {
    #[new]
    #[pyo3(signature = (source_document_id=""))]
    fn new(source_document_id: &str) -> Self {
        Self { inner: graph::KnowledgeGraph::new(source_document_id) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        graph::parse_kg_json(text).map(|inner| Self { inner }).map_err(err)
    }

    /// Builds a graph from `(head, relation, tail)` tuples, skipping bad ones.
    #[staticmethod]
    #[pyo3(signature = (triplets, source_document_id=""))]
    fn from_triplets(triplets: Vec<(String, String, String)>, source_document_id: &str) -> Self {
        let triplets: Vec<Triplet> = triplets.into_iter().map(|(h, r, t)| Triplet::new(h, r, t)).collect();
        Self { inner: graph::from_triplets(&triplets, None, source_document_id) }
    }

    /// Adds one triplet; returns False if the edge already existed.
    fn add_triplet(&mut self, head: &str, relation: &str, tail: &str) -> PyResult<bool> {
        self.inner.add_triplet(&Triplet::new(head, relation, tail), None).map_err(err)
    }

    #[pyo3(signature = (label, category=None))]
    fn add_node(&mut self, label: &str, category: Option<&str>) -> PyResult<String> {
        self.inner.ensure_node(label, category).map_err(err)
    }

    #[getter]
    fn source_document_id(&self) -> String {
        self.inner.source_document_id().to_string()
    }

    fn node_ids(&self) -> Vec<String> {
        self.inner.nodes().map(|n| n.id.clone()).collect()
    }

    fn label(&self, id: &str) -> Option<String> {
        self.inner.node(id).map(|n| n.label.clone())
    }

    fn edges(&self) -> Vec<(String, String, String)> {
        self.inner.edges().map(|e| (e.head_id, e.relation, e.tail_id)).collect()
    }

    /// Merges `other` into a new graph; returns `(graph, conflicts)`.
    fn merge(&self, other: &Self) -> (Self, Vec<String>) {
        let out = graph::merge_graphs(&self.inner, &other.inner);
        (Self { inner: out.graph }, out.conflicts)
    }

    fn to_json(&self) -> String {
        graph::serialize_kg_json(&self.inner)
    }

    fn to_dot(&self) -> String {
        graph::export_dot(&self.inner)
    }

    /// Rubric report as JSON, scored against the document JSON.
    fn rubric(&self, document_json: &str) -> PyResult<String> {
        let doc: ingest::Document = serde_json::from_str(document_json).map_err(err)?;
        serde_json::to_string_pretty(&graph::rubric_report(&self.inner, &doc)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.node_count()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("KnowledgeGraph(nodes={}, edges={})", self.inner.node_count(), self.inner.edge_count())
    }
}

#[pymodule]
fn pymatkg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_lsum, m)?)?;
    m.add_function(wrap_pyfunction!(match_report, m)?)?;
    m.add_function(wrap_pyfunction!(lcs_length, m)?)?;
    m.add_function(wrap_pyfunction!(parse_value_unit, m)?)?;
    m.add_function(wrap_pyfunction!(parse_markdown_tables, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_entity, m)?)?;
    m.add_function(wrap_pyfunction!(parse_document, m)?)?;
    m.add_function(wrap_pyfunction!(template_names, m)?)?;
    m.add_function(wrap_pyfunction!(render_template, m)?)?;
    m.add_class::<PyKnowledgeGraph>()?;
    m.add_class::<PyValueParts>()?;
    Ok(())
}
