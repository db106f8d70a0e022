//! Eight-principle quality rubric with structural proxies.
//!
//! The principles are judged by a reader. Where a structural measurement
//! tracks a principle it is reported as a proxy score; the rest are marked
//! `manual`. Proxies are indicators only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use petgraph::unionfind::UnionFind;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use super::{normalize_entity, KnowledgeGraph};
use crate::ingest::Document;

pub const PRINCIPLES: [&str; 8] = [
    "Clarity of Experimental Process",
    "Showcase Key Findings",
    "Microstructure Context",
    "Connect Microstructural Elements",
    "Diverse Data Sources",
    "Clarity in Terminology",
    "Structured Understanding",
    "Insightful Representation",
];

pub const GENERIC_RELATIONS: [&str; 2] = ["related to", "has"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProxyScore {
    Automated(f64),
    Manual,
}

impl ProxyScore {
    pub fn value(self) -> Option<f64> {
        match self {
            ProxyScore::Automated(v) => Some(v),
            ProxyScore::Manual => None,
        }
    }
}

impl Serialize for ProxyScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ProxyScore::Automated(v) => s.serialize_f64(*v),
            ProxyScore::Manual => s.serialize_str("manual"),
        }
    }
}

impl<'de> Deserialize<'de> for ProxyScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "manual" => Ok(ProxyScore::Manual),
            serde_json::Value::Number(n) => n
                .as_f64()
                .filter(|v| (0.0..=1.0).contains(v))
                .map(ProxyScore::Automated)
                .ok_or_else(|| de::Error::custom("proxy score must lie in [0, 1]")),
            other => Err(de::Error::custom(format!("expected a number or \"manual\", got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipleEntry {
    pub index: u8,
    pub name: String,
    pub automated_proxy_score: ProxyScore,
    /// What the proxy measures; empty for manual principles.
    pub proxy: String,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub connected_components: usize,
    pub isolated_nodes: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricReport {
    pub source_document_id: String,
    pub principles: Vec<PrincipleEntry>,
    pub stats: GraphStats,
}

impl RubricReport {
    /// Mean over the principles that have an automated proxy.
    pub fn mean_automated_proxy(&self) -> f64 {
        let values: Vec<f64> = self.principles.iter().filter_map(|p| p.automated_proxy_score.value()).collect();
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("Rubric for `{}` (structural proxies)\n\n", self.source_document_id);
        for p in &self.principles {
            let score = match p.automated_proxy_score {
                ProxyScore::Automated(v) => format!("{v:.3}"),
                ProxyScore::Manual => "manual".to_string(),
            };
            let _ = writeln!(out, "{}. {:<34} {:>7}  {}", p.index, p.name, score, p.proxy);
        }
        let s = &self.stats;
        let _ = write!(
            out,
            "\nmean automated proxy: {:.3}\nnodes: {}  edges: {}  components: {}  isolated: {}  density: {:.4}\n",
            self.mean_automated_proxy(),
            s.node_count,
            s.edge_count,
            s.connected_components,
            s.isolated_nodes,
            s.density
        );
        out
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn has_category(kg: &KnowledgeGraph, id: &str, wanted: &[&str]) -> bool {
    kg.node(id)
        .and_then(|n| n.category.as_deref())
        .is_some_and(|c| wanted.iter().any(|w| c.eq_ignore_ascii_case(w)))
}

/// Document text in the same normal form as node ids, padded so that
/// containment checks respect word edges.
fn searchable(document: &Document) -> String {
    let words: Vec<String> = document
        .full_text()
        .split_whitespace()
        .filter_map(|w| normalize_entity(w).ok())
        .collect();
    format!(" {} ", words.join(" "))
}

pub fn rubric_report(kg: &KnowledgeGraph, document: &Document) -> RubricReport {
    let ids: Vec<&str> = kg.nodes().map(|n| n.id.as_str()).collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let n = ids.len();
    let edges: Vec<_> = kg.edges().collect();

    let mut components = UnionFind::<usize>::new(n);
    let mut touched = vec![false; n];
    let mut pairs = BTreeSet::new();
    for e in &edges {
        let (h, t) = (index[e.head_id.as_str()], index[e.tail_id.as_str()]);
        components.union(h, t);
        touched[h] = true;
        touched[t] = true;
        if h != t {
            pairs.insert((h, t));
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        *sizes.entry(components.find(i)).or_default() += 1;
    }
    let isolated = touched.iter().filter(|t| !**t).count();
    let largest = sizes.values().copied().max().unwrap_or(0);

    let stats = GraphStats {
        node_count: n,
        edge_count: edges.len(),
        connected_components: sizes.len(),
        isolated_nodes: isolated,
        density: if n > 1 { pairs.len() as f64 / (n * (n - 1)) as f64 } else { 0.0 },
    };

    let process_edges = edges
        .iter()
        .filter(|e| has_category(kg, &e.head_id, &["process"]) || has_category(kg, &e.tail_id, &["process"]))
        .count();
    let findings = ids.iter().filter(|id| has_category(kg, id, &["result", "property"])).count();
    let text = searchable(document);
    let grounded = ids.iter().filter(|id| text.contains(&format!(" {id} "))).count();
    let specific = edges
        .iter()
        .filter(|e| !GENERIC_RELATIONS.iter().any(|g| e.relation.trim().eq_ignore_ascii_case(g)))
        .count();
    let connected = if n == 0 { 0.0 } else { 1.0 - ratio(isolated, n) };

    let proxies: [Option<(f64, &str)>; 8] = [
        Some((ratio(process_edges, edges.len()), "share of edges touching a process node")),
        Some((ratio(findings, n), "share of nodes categorized result or property")),
        None,
        Some((connected, "1 - share of isolated nodes")),
        None,
        Some((ratio(grounded, n), "share of node labels found verbatim in the document")),
        Some((ratio(largest, n), "share of nodes in the largest connected component")),
        Some((ratio(specific, edges.len()), "share of edges with a non-generic relation")),
    ];
    let principles = PRINCIPLES
        .iter()
        .zip(proxies)
        .enumerate()
        .map(|(i, (name, proxy))| PrincipleEntry {
            index: i as u8 + 1,
            name: name.to_string(),
            automated_proxy_score: proxy.map_or(ProxyScore::Manual, |(v, _)| ProxyScore::Automated(v)),
            proxy: proxy.map_or(String::new(), |(_, what)| what.to_string()),
            notes: String::new(),
        })
        .collect();
    RubricReport { source_document_id: kg.source_document_id().to_string(), principles, stats }
}
