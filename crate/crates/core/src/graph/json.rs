use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{normalize_entity, Endpoint, GraphError, KnowledgeGraph, Node, Provenance};

#[derive(Serialize)]
struct NodeOut<'a> {
    id: &'a str,
    label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    category: Option<&'a str>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    attributes: &'a BTreeMap<String, String>,
}

#[derive(Serialize)]
struct EdgeOut<'a> {
    head: &'a str,
    relation: &'a str,
    tail: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<&'a Provenance>,
}

#[derive(Serialize)]
struct GraphOut<'a> {
    source_document_id: &'a str,
    nodes: Vec<NodeOut<'a>>,
    edges: Vec<EdgeOut<'a>>,
}

/// Canonical, pretty-printed KG JSON with a trailing newline.
pub fn serialize_kg_json(kg: &KnowledgeGraph) -> String {
    let out = GraphOut {
        source_document_id: &kg.source_document_id,
        nodes: kg
            .nodes
            .values()
            .map(|n| NodeOut {
                id: &n.id,
                label: &n.label,
                category: n.category.as_deref(),
                attributes: &n.attributes,
            })
            .collect(),
        edges: kg
            .edges
            .iter()
            .map(|((h, r, t), p)| EdgeOut { head: h, relation: r, tail: t, provenance: p.as_ref() })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&out).expect("graph serializes");
    text.push('\n');
    text
}

/// Returns the body of the first fenced code block, or the trimmed text when
/// there is no fence. Prose around a bare JSON value is cut away as well.
pub fn strip_code_fences(text: &str) -> &str {
    let trimmed = text.trim();
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        let end = body.find("```").unwrap_or(body.len());
        return body[..end].trim();
    }
    let open = trimmed.find(['{', '[']);
    let close = trimmed.rfind(['}', ']']);
    match (open, close) {
        (Some(a), Some(b)) if a < b => &trimmed[a..=b],
        _ => trimmed,
    }
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> GraphError {
    GraphError::SchemaViolation { path: path.into(), message: message.into() }
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn first_key<'a>(obj: &'a Map<String, Value>, keys: &[&str]) -> Option<(&'a str, &'a Value)> {
    keys.iter().find_map(|k| obj.get_key_value(*k).map(|(k, v)| (k.as_str(), v)))
}

fn optional_string(obj: &Map<String, Value>, keys: &[&str], path: &str) -> Result<Option<String>, GraphError> {
    match first_key(obj, keys) {
        None | Some((_, Value::Null)) => Ok(None),
        Some((_, Value::String(s))) => Ok(Some(s.clone()).filter(|s| !s.trim().is_empty())),
        Some((k, _)) => Err(violation(format!("{path}.{k}"), "expected a string")),
    }
}

fn parse_provenance(v: &Value, path: &str) -> Result<Option<Provenance>, GraphError> {
    if v.is_null() {
        return Ok(None);
    }
    serde_json::from_value(v.clone())
        .map(Some)
        .map_err(|e| violation(format!("{path}.provenance"), e.to_string()))
}

/// Parses KG JSON, tolerating code fences and surrounding prose. Declared
/// node ids are remapped to canonical ids; edges may reference nodes by
/// declared id or by label.
pub fn parse_kg_json(text: &str) -> Result<KnowledgeGraph, GraphError> {
    let body = strip_code_fences(text);
    let root: Value = serde_json::from_str(body).map_err(|e| violation("$", format!("invalid JSON: {e}")))?;
    let obj = root.as_object().ok_or_else(|| violation("$", "expected an object"))?;

    let mut graph = KnowledgeGraph::new(match obj.get("source_document_id") {
        None | Some(Value::Null) => String::new(),
        Some(v) => scalar_text(v).ok_or_else(|| violation("source_document_id", "expected a string"))?,
    });

    let nodes = match obj.get("nodes") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(violation("nodes", "expected an array")),
        None => return Err(violation("nodes", "missing")),
    };
    let mut declared: BTreeMap<String, String> = BTreeMap::new();
    for (i, raw) in nodes.iter().enumerate() {
        let path = format!("nodes[{i}]");
        let node = raw.as_object().ok_or_else(|| violation(&path, "expected an object"))?;
        let declared_id = match node.get("id") {
            None | Some(Value::Null) => None,
            Some(v) => Some(scalar_text(v).ok_or_else(|| violation(format!("{path}.id"), "expected a string"))?),
        };
        let label = match (first_key(node, &["label", "name"]), &declared_id) {
            (Some((_, Value::String(s))), _) => s.clone(),
            (Some((k, _)), _) => return Err(violation(format!("{path}.{k}"), "expected a string")),
            (None, Some(id)) => id.clone(),
            (None, None) => return Err(violation(format!("{path}.label"), "missing")),
        };
        let id = normalize_entity(&label).map_err(|_| violation(format!("{path}.label"), "empty label"))?;
        let category = optional_string(node, &["category", "type", "group"], &path)?;
        let mut attributes = BTreeMap::new();
        match first_key(node, &["attributes", "properties"]) {
            None | Some((_, Value::Null)) => {}
            Some((_, Value::Object(m))) => {
                for (k, v) in m {
                    let text = scalar_text(v).unwrap_or_else(|| v.to_string());
                    attributes.insert(k.clone(), text);
                }
            }
            Some((k, _)) => return Err(violation(format!("{path}.{k}"), "expected an object")),
        }
        if let Some(d) = declared_id {
            declared.insert(d, id.clone());
        }
        let label = label.split_whitespace().collect::<Vec<_>>().join(" ");
        graph.insert_node(Node { id, label, category, attributes });
    }

    let edges = match obj.get("edges") {
        Some(Value::Array(a)) => a.as_slice(),
        None | Some(Value::Null) => &[],
        Some(_) => return Err(violation("edges", "expected an array")),
    };
    for (i, raw) in edges.iter().enumerate() {
        let path = format!("edges[{i}]");
        let edge = raw.as_object().ok_or_else(|| violation(&path, "expected an object"))?;
        let mut ends = Vec::with_capacity(2);
        for (endpoint, keys) in [
            (Endpoint::Head, &["head", "source", "from"][..]),
            (Endpoint::Tail, &["tail", "target", "to"][..]),
        ] {
            let (key, value) = first_key(edge, keys).ok_or_else(|| violation(format!("{path}.{endpoint}"), "missing"))?;
            let r = scalar_text(value).ok_or_else(|| violation(format!("{path}.{key}"), "expected a string"))?;
            let resolved = declared
                .get(&r)
                .cloned()
                .or_else(|| normalize_entity(&r).ok().filter(|id| graph.nodes.contains_key(id)))
                .ok_or(GraphError::DanglingEdge { endpoint, id: r })?;
            ends.push(resolved);
        }
        let relation = match first_key(edge, &["relation", "label", "type"]) {
            Some((_, Value::String(s))) if !s.trim().is_empty() => s.clone(),
            Some((k, _)) => return Err(violation(format!("{path}.{k}"), "expected a non-empty string")),
            None => return Err(violation(format!("{path}.relation"), "missing")),
        };
        let provenance = match edge.get("provenance") {
            Some(v) => parse_provenance(v, &path)?,
            None => None,
        };
        graph.add_edge(&ends[0], &relation, &ends[1], provenance)?;
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{from_triplets, Pipeline, Triplet};

    fn sample() -> KnowledgeGraph {
        let prov = Provenance { section: Some("Methods".into()), pipeline: Pipeline::Gen1 };
        let mut g = from_triplets(
            &[
                Triplet::new("Ti-6Al-4V", "etched in", "Kroll's reagent"),
                Triplet::new("Ti-6Al-4V", "has", "\"duplex\" microstructure"),
            ],
            Some(prov),
            "ti64",
        );
        g.insert_node(Node {
            id: "ti-6al-4v".into(),
            label: "Ti-6Al-4V".into(),
            category: Some("material".into()),
            attributes: [("form".to_string(), "bar".to_string())].into(),
        });
        g
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let g = sample();
        let text = serialize_kg_json(&g);
        let back = parse_kg_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(serialize_kg_json(&back), text);
    }

    #[test]
    fn code_fences_and_prose_are_stripped() {
        let raw = "Here is the graph:\n```json\n{\"nodes\":[{\"id\":\"a\",\"label\":\"A\"}],\"edges\":[]}\n```\nDone.";
        assert_eq!(parse_kg_json(raw).unwrap().node_count(), 1);
        let bare = "Sure. {\"nodes\":[], \"edges\":[]} hope this helps";
        assert!(parse_kg_json(bare).unwrap().is_empty());
    }

    #[test]
    fn dangling_edge_reported() {
        let raw = r#"{"nodes":[{"id":"a","label":"A"}],"edges":[{"head":"a","relation":"r","tail":"ghost"}]}"#;
        assert_eq!(
            parse_kg_json(raw).unwrap_err(),
            GraphError::DanglingEdge { endpoint: Endpoint::Tail, id: "ghost".into() }
        );
    }

    #[test]
    fn loose_ids_are_rekeyed() {
        let raw = r#"{"nodes":[{"id":1,"label":"Forging","category":"process"},{"id":2,"label":"Alpha Phase"}],
            "edges":[{"head":1,"relation":"produces","tail":"alpha phase"}]}"#;
        let g = parse_kg_json(raw).unwrap();
        let e: Vec<_> = g.edges().collect();
        assert_eq!((e[0].head_id.as_str(), e[0].tail_id.as_str()), ("forging", "alpha phase"));
    }

    #[test]
    fn schema_paths() {
        let cases = [
            (r#"[]"#, "$"),
            (r#"{"edges":[]}"#, "nodes"),
            (r#"{"nodes":[{"label":5.5e999}]}"#, "$"),
            (r#"{"nodes":[{"id":"a","label":[]}]}"#, "nodes[0].label"),
            (r#"{"nodes":[{"id":"a","label":"A"}],"edges":[{"head":"a","tail":"a"}]}"#, "edges[0].relation"),
            (r#"{"nodes":[{"id":"a","label":"..."}]}"#, "nodes[0].label"),
        ];
        for (raw, want) in cases {
            match parse_kg_json(raw) {
                Err(GraphError::SchemaViolation { path, .. }) => assert_eq!(path, want, "{raw}"),
                other => panic!("{raw}: {other:?}"),
            }
        }
    }
}
