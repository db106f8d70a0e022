//! (head, relation, tail) knowledge graphs.
//!
//! Node ids are always [`normalize_entity`] of the label, so two surface
//! forms that differ only in case, spacing or trailing punctuation land on
//! one node. Edges are unique per (head, relation, tail) and kept in sorted
//! order, which makes every serialization canonical.

mod dot;
mod json;
mod pipeline;
mod rubric;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dot::export_dot;
pub use json::{parse_kg_json, serialize_kg_json, strip_code_fences};
pub use pipeline::{gen1_extract, gen2_extract, parse_model_graph, Gen1Outcome, Gen2Outcome, PipelineError, FORMAT_REMINDER};
pub use rubric::{rubric_report, GraphStats, PrincipleEntry, ProxyScore, RubricReport, GENERIC_RELATIONS, PRINCIPLES};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("entity label is empty")]
    EmptyLabel,
    #[error("relation is empty")]
    EmptyRelation,
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("edge {endpoint} `{id}` does not reference a known node")]
    DanglingEdge { endpoint: Endpoint, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Head,
    Tail,
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Endpoint::Head => "head",
            Endpoint::Tail => "tail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Gen1,
    Gen2,
}

impl std::str::FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gen1" => Ok(Pipeline::Gen1),
            "gen2" => Ok(Pipeline::Gen2),
            other => Err(format!("unknown strategy `{other}` (expected gen1|gen2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<String>,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub label: String,
    pub category: Option<String>,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub head_id: String,
    pub relation: String,
    pub tail_id: String,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self { head: head.into(), relation: relation.into(), tail: tail.into() }
    }
}

fn fold_quotes(c: char) -> char {
    match c {
        '\u{2018}' | '\u{2019}' | '\u{2032}' => '\'',
        '\u{201c}' | '\u{201d}' => '"',
        other => other,
    }
}

fn is_end_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '\u{2013}' | '\u{2014}' | '\u{2026}' | '\u{ab}' | '\u{bb}')
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical node id: case-folded, whitespace collapsed, trimmed, and with
/// punctuation removed from both ends.
pub fn normalize_entity(label: &str) -> Result<String, GraphError> {
    let folded: String = label.to_lowercase().chars().map(fold_quotes).collect();
    let mut id = collapse_whitespace(&folded);
    loop {
        let trimmed = id.trim_matches(is_end_punctuation).trim();
        if trimmed.len() == id.len() {
            break;
        }
        id = trimmed.to_string();
    }
    if id.is_empty() {
        return Err(GraphError::EmptyLabel);
    }
    Ok(id)
}

fn clean_relation(relation: &str) -> Result<String, GraphError> {
    let r = collapse_whitespace(relation);
    if r.is_empty() {
        return Err(GraphError::EmptyRelation);
    }
    Ok(r)
}

type EdgeKey = (String, String, String);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<String, Node>,
    edges: BTreeMap<EdgeKey, Option<Provenance>>,
    source_document_id: String,
}

impl KnowledgeGraph {
    pub fn new(source_document_id: impl Into<String>) -> Self {
        Self { source_document_id: source_document_id.into(), ..Self::default() }
    }

    pub fn source_document_id(&self) -> &str {
        &self.source_document_id
    }

    pub fn set_source_document_id(&mut self, id: impl Into<String>) {
        self.source_document_id = id.into();
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|((h, r, t), p)| Edge {
            head_id: h.clone(),
            relation: r.clone(),
            tail_id: t.clone(),
            provenance: p.clone(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distinct relation strings (the graph's relation set).
    pub fn relations(&self) -> Vec<&str> {
        let mut rels: Vec<&str> = self.edges.keys().map(|(_, r, _)| r.as_str()).collect();
        rels.sort_unstable();
        rels.dedup();
        rels
    }

    /// Adds a node for `label` unless its id already exists. Returns the id.
    pub fn ensure_node(&mut self, label: &str, category: Option<&str>) -> Result<String, GraphError> {
        let id = normalize_entity(label)?;
        let node = Node {
            id: id.clone(),
            label: collapse_whitespace(label),
            category: category.map(str::to_string).filter(|c| !c.trim().is_empty()),
            attributes: BTreeMap::new(),
        };
        self.insert_node(node);
        Ok(id)
    }

    /// Inserts or merges a node; the existing node's label, category and
    /// attribute values win. Returns a message per conflicting field.
    pub fn insert_node(&mut self, node: Node) -> Vec<String> {
        let mut conflicts = Vec::new();
        match self.nodes.get_mut(&node.id) {
            None => {
                self.nodes.insert(node.id.clone(), node);
            }
            Some(existing) => {
                match (&existing.category, node.category) {
                    (None, Some(c)) => existing.category = Some(c),
                    (Some(a), Some(b)) if *a != b => {
                        conflicts.push(format!("node `{}`: category `{a}` kept over `{b}`", existing.id));
                    }
                    _ => {}
                }
                for (k, v) in node.attributes {
                    match existing.attributes.get(&k) {
                        None => {
                            existing.attributes.insert(k, v);
                        }
                        Some(old) if *old != v => {
                            conflicts.push(format!("node `{}`: attribute `{k}` = `{old}` kept over `{v}`", existing.id));
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        conflicts
    }

    /// Adds an edge between existing node ids. Returns `false` when the same
    /// (head, relation, tail) was already present.
    pub fn add_edge(
        &mut self,
        head_id: &str,
        relation: &str,
        tail_id: &str,
        provenance: Option<Provenance>,
    ) -> Result<bool, GraphError> {
        for (endpoint, id) in [(Endpoint::Head, head_id), (Endpoint::Tail, tail_id)] {
            if !self.nodes.contains_key(id) {
                return Err(GraphError::DanglingEdge { endpoint, id: id.to_string() });
            }
        }
        let key = (head_id.to_string(), clean_relation(relation)?, tail_id.to_string());
        if self.edges.contains_key(&key) {
            return Ok(false);
        }
        self.edges.insert(key, provenance);
        Ok(true)
    }

    pub fn add_triplet(&mut self, triplet: &Triplet, provenance: Option<Provenance>) -> Result<bool, GraphError> {
        let relation = clean_relation(&triplet.relation)?;
        let head = normalize_entity(&triplet.head)?;
        normalize_entity(&triplet.tail)?;
        self.ensure_node(&triplet.head, None)?;
        let tail = self.ensure_node(&triplet.tail, None)?;
        self.add_edge(&head, &relation, &tail, provenance)
    }

    /// Overwrites the provenance of every edge.
    pub fn set_provenance(&mut self, provenance: Option<Provenance>) {
        for p in self.edges.values_mut() {
            p.clone_from(&provenance);
        }
    }

    pub fn check_integrity(&self) -> Result<(), GraphError> {
        for (id, node) in &self.nodes {
            if *id != node.id || normalize_entity(&node.label).as_deref() != Ok(id.as_str()) {
                return Err(GraphError::SchemaViolation {
                    path: format!("nodes[{id}]"),
                    message: "node id is not the normalized label".into(),
                });
            }
        }
        for (h, _, t) in self.edges.keys() {
            for (endpoint, id) in [(Endpoint::Head, h), (Endpoint::Tail, t)] {
                if !self.nodes.contains_key(id) {
                    return Err(GraphError::DanglingEdge { endpoint, id: id.clone() });
                }
            }
        }
        Ok(())
    }
}

/// Builds a graph from raw triplets. Nodes are created on first mention and
/// duplicate triplets collapse; triplets with an empty part are skipped.
pub fn from_triplets(triplets: &[Triplet], provenance: Option<Provenance>, source_document_id: &str) -> KnowledgeGraph {
    let mut graph = KnowledgeGraph::new(source_document_id);
    for t in triplets {
        if let Err(e) = graph.add_triplet(t, provenance.clone()) {
            log::warn!("skipping triplet {t:?}: {e}");
        }
    }
    graph
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub graph: KnowledgeGraph,
    pub conflicts: Vec<String>,
}

/// Union by node id and by (head, relation, tail); `a` wins every conflict.
/// An empty source id on either side adopts the other's id.
pub fn merge_graphs(a: &KnowledgeGraph, b: &KnowledgeGraph) -> MergeOutcome {
    let mut graph = a.clone();
    let mut conflicts = Vec::new();
    match (a.source_document_id.as_str(), b.source_document_id.as_str()) {
        ("", other) => graph.source_document_id = other.to_string(),
        (mine, theirs) if !theirs.is_empty() && mine != theirs => {
            conflicts.push(format!("source document `{theirs}` merged into `{mine}`"));
        }
        _ => {}
    }
    for node in b.nodes.values() {
        conflicts.extend(graph.insert_node(node.clone()));
    }
    for (key, provenance) in &b.edges {
        graph.edges.entry(key.clone()).or_insert_with(|| provenance.clone());
    }
    MergeOutcome { graph, conflicts }
}
