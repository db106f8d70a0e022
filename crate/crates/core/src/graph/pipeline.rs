use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use super::json::strip_code_fences;
use super::{from_triplets, merge_graphs, parse_kg_json, GraphError, KnowledgeGraph, Pipeline, Provenance, Triplet};
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, ProviderConfig};
use crate::ingest::{Document, Section};
use crate::prompt::{PromptError, PromptTemplate};

/// Appended to the stage-2 prompt when the first answer did not parse.
pub const FORMAT_REMINDER: &str = "Your previous answer could not be parsed. Respond with one JSON object \
of the form {\"nodes\": [{\"id\": ..., \"label\": ..., \"category\": ...}], \"edges\": [{\"head\": ..., \
\"relation\": ..., \"tail\": ...}]} and nothing else: no prose, no comments, no trailing commas.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("document has no content")]
    EmptyInput,
    #[error("{stage}: could not parse model output: {message}")]
    ParseFailure { stage: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gen1Outcome {
    pub graph: KnowledgeGraph,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gen2Outcome {
    pub summary: String,
    pub graph: KnowledgeGraph,
    pub diagnostics: Vec<String>,
    pub retried: bool,
}

fn triplet_from_value(v: &Value, path: &str) -> Result<Triplet, GraphError> {
    let bad = || GraphError::SchemaViolation {
        path: path.to_string(),
        message: "expected {head, relation, tail} or a 3-element array".into(),
    };
    let text = |v: &Value| match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    };
    match v {
        Value::Array(a) if a.len() == 3 => {
            let parts: Option<Vec<String>> = a.iter().map(text).collect();
            let p = parts.ok_or_else(bad)?;
            Ok(Triplet::new(&p[0], &p[1], &p[2]))
        }
        Value::Object(o) => {
            let pick = |keys: &[&str]| keys.iter().find_map(|k| o.get(*k)).and_then(text);
            match (
                pick(&["head", "subject", "source"]),
                pick(&["relation", "predicate", "relationship"]),
                pick(&["tail", "object", "target"]),
            ) {
                (Some(h), Some(r), Some(t)) => Ok(Triplet::new(h, r, t)),
                _ => Err(bad()),
            }
        }
        _ => Err(bad()),
    }
}

/// Parses a model answer that is either KG JSON or a triplet list (bare, or
/// under a `triplets` key). Every edge gets `provenance`.
pub fn parse_model_graph(
    text: &str,
    provenance: Option<Provenance>,
    source_document_id: &str,
) -> Result<KnowledgeGraph, GraphError> {
    let body = strip_code_fences(text);
    let root: Value = serde_json::from_str(body).map_err(|e| GraphError::SchemaViolation {
        path: "$".into(),
        message: format!("invalid JSON: {e}"),
    })?;
    let (items, prefix) = match &root {
        Value::Object(o) if o.contains_key("nodes") => {
            let mut g = parse_kg_json(body)?;
            g.set_provenance(provenance);
            g.set_source_document_id(source_document_id);
            return Ok(g);
        }
        Value::Object(o) => match ["triplets", "relations"].iter().find_map(|k| o.get(*k).map(|v| (*k, v))) {
            Some((k, Value::Array(a))) => (a, k.to_string()),
            _ => {
                return Err(GraphError::SchemaViolation {
                    path: "$".into(),
                    message: "expected a triplet array or a nodes/edges object".into(),
                })
            }
        },
        Value::Array(a) => (a, String::new()),
        _ => {
            return Err(GraphError::SchemaViolation { path: "$".into(), message: "expected an array or object".into() })
        }
    };
    let triplets = items
        .iter()
        .enumerate()
        .map(|(i, v)| triplet_from_value(v, &format!("{prefix}[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(from_triplets(&triplets, provenance, source_document_id))
}

fn section_text(section: &Section) -> String {
    let mut text = section.heading.clone();
    for p in &section.paragraphs {
        text.push_str("\n\n");
        text.push_str(p);
    }
    text
}

fn ask(gateway: &Gateway, provider: &ProviderConfig, prompt: String) -> Result<String, GatewayError> {
    let request = ChatRequest::new(provider.clone(), vec![ChatMessage::user(prompt)])?;
    Ok(gateway.complete(&request)?.content)
}

/// Direct relation extraction: one call per content section, run
/// concurrently under the gateway's limiter, merged in section order.
pub fn gen1_extract(
    document: &Document,
    gateway: &Gateway,
    provider: &ProviderConfig,
    template: &PromptTemplate,
) -> Result<Gen1Outcome, PipelineError> {
    let sections: Vec<&Section> = document.content_sections().collect();
    let vars = BTreeMap::new();
    let prompts = sections
        .iter()
        .map(|s| template.render(&section_text(s), &vars).map(|r| r.text))
        .collect::<Result<Vec<_>, _>>()?;

    let answers: Vec<Result<String, GatewayError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = prompts
            .into_iter()
            .map(|p| scope.spawn(move || ask(gateway, provider, p)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("section worker panicked")).collect()
    });

    let mut graph = KnowledgeGraph::new(&document.id);
    let mut diagnostics = Vec::new();
    for (section, answer) in sections.iter().zip(answers) {
        let provenance = Provenance { section: Some(section.heading.clone()), pipeline: Pipeline::Gen1 };
        match parse_model_graph(&answer?, Some(provenance), &document.id) {
            Ok(part) => {
                let merged = merge_graphs(&graph, &part);
                diagnostics.extend(merged.conflicts);
                graph = merged.graph;
            }
            Err(e) => diagnostics.push(format!("section `{}`: ParseFailure: {e}", section.heading)),
        }
    }
    Ok(Gen1Outcome { graph, diagnostics })
}

/// Summary-first extraction: the whole document is condensed into a
/// process-centric summary, which a second call turns into KG JSON.
pub fn gen2_extract(
    document: &Document,
    gateway: &Gateway,
    provider: &ProviderConfig,
    summary_template: &PromptTemplate,
    kg_template: &PromptTemplate,
) -> Result<Gen2Outcome, PipelineError> {
    if document.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let vars = BTreeMap::new();
    let summary_prompt = summary_template.render(&document.full_text(), &vars)?;
    let summary = ask(gateway, provider, summary_prompt.text)?.trim().to_string();
    if summary.is_empty() {
        return Err(PipelineError::ParseFailure { stage: summary_template.name().into(), message: "empty summary".into() });
    }

    let provenance = Some(Provenance { section: None, pipeline: Pipeline::Gen2 });
    let kg_prompt = kg_template.render(&summary, &vars)?.text;
    let mut diagnostics = Vec::new();
    let first = ask(gateway, provider, kg_prompt.clone())?;
    let (graph, retried) = match parse_model_graph(&first, provenance.clone(), &document.id) {
        Ok(g) => (g, false),
        Err(e) => {
            log::warn!("{}: retrying after parse failure: {e}", kg_template.name());
            diagnostics.push(format!("{}: ParseFailure on first answer ({e}); re-prompted", kg_template.name()));
            let second = ask(gateway, provider, format!("{kg_prompt}\n\n{FORMAT_REMINDER}"))?;
            let g = parse_model_graph(&second, provenance, &document.id).map_err(|e| PipelineError::ParseFailure {
                stage: kg_template.name().into(),
                message: e.to_string(),
            })?;
            (g, true)
        }
    };
    Ok(Gen2Outcome { summary, graph, diagnostics, retried })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendReply, ChatBackend, ChatResponse, Mode};
    use crate::ingest::{parse_document, TextFormat};
    use crate::prompt::builtin_template;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    /// Answers by the first rule whose needle occurs in the prompt.
    struct Scripted {
        rules: Vec<(&'static str, &'static str)>,
        calls: AtomicUsize,
        seen: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(rules: Vec<(&'static str, &'static str)>) -> Arc<Self> {
            Arc::new(Self { rules, calls: AtomicUsize::new(0), seen: Mutex::new(Vec::new()) })
        }
    }

    impl ChatBackend for Scripted {
        fn send(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let prompt = &request.messages[0].content;
            self.seen.lock().unwrap().push(prompt.clone());
            let content = self
                .rules
                .iter()
                .find(|(needle, _)| prompt.contains(needle))
                .map(|(_, answer)| answer.to_string())
                .ok_or_else(|| GatewayError::Transport(format!("no scripted answer for {prompt:?}")))?;
            Ok(BackendReply {
                response: ChatResponse { content, prompt_tokens: 0, completion_tokens: 0, latency_ms: 0, from_cache: false },
                raw: Value::Null,
            })
        }
    }

    fn gateway(backend: Arc<Scripted>) -> Gateway {
        Gateway::new(Mode::Live, None, backend).unwrap()
    }

    const DOC: &str = "# Alloy\n\n## Methods\n\nThe bar was forged.\n\n## Results\n\nHardness rose.\n";

    #[test]
    fn triplet_shapes() {
        let a = parse_model_graph(r#"[{"head":"a","relation":"r","tail":"b"}]"#, None, "d").unwrap();
        let b = parse_model_graph(r#"[["a","r","b"]]"#, None, "d").unwrap();
        let c = parse_model_graph("```json\n{\"triplets\":[[\"a\",\"r\",\"b\"]]}\n```", None, "d").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(parse_model_graph("[1]", None, "d").is_err());
        assert!(parse_model_graph("not json", None, "d").is_err());
    }

    #[test]
    fn gen1_per_section_with_diagnostics() {
        let backend = Scripted::new(vec![
            ("forged", r#"[["bar","undergoes","forging"]]"#),
            ("Hardness", "I could not find relations, sorry."),
        ]);
        let doc = parse_document(DOC, TextFormat::Markdown).unwrap();
        let tmpl = builtin_template("relation_extraction").unwrap();
        let out = gen1_extract(&doc, &gateway(backend.clone()), &ProviderConfig::openai("m"), &tmpl).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        assert_eq!(out.graph.edge_count(), 1);
        assert_eq!(out.diagnostics.len(), 1);
        assert!(out.diagnostics[0].contains("Results"));
        let e = out.graph.edges().next().unwrap();
        assert_eq!(e.provenance.unwrap(), Provenance { section: Some("Methods".into()), pipeline: Pipeline::Gen1 });
    }

    #[test]
    fn gen1_empty_document() {
        let doc = Document { id: "e".into(), title: String::new(), sections: vec![], figures: vec![], diagnostics: vec![] };
        let backend = Scripted::new(vec![]);
        let tmpl = builtin_template("relation_extraction").unwrap();
        let out = gen1_extract(&doc, &gateway(backend.clone()), &ProviderConfig::openai("m"), &tmpl).unwrap();
        assert!(out.graph.is_empty());
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn gen1_propagates_gateway_errors() {
        let doc = parse_document(DOC, TextFormat::Markdown).unwrap();
        let tmpl = builtin_template("relation_extraction").unwrap();
        let err = gen1_extract(&doc, &gateway(Scripted::new(vec![])), &ProviderConfig::openai("m"), &tmpl).unwrap_err();
        assert!(matches!(err, PipelineError::Gateway(_)));
    }

    #[test]
    fn gen2_retries_once_on_malformed_json() {
        let kg = r#"{"nodes":[{"id":"f","label":"Forging","category":"process"}],"edges":[]}"#;
        let backend = Scripted::new(vec![
            ("could not be parsed", kg),
            ("Summary:", "{\"nodes\": [oops"),
            ("forged", "The bar is forged; hardness rises."),
        ]);
        let doc = parse_document(DOC, TextFormat::Markdown).unwrap();
        let out = gen2_extract(
            &doc,
            &gateway(backend.clone()),
            &ProviderConfig::openai("m"),
            &builtin_template("process_summary").unwrap(),
            &builtin_template("summary_to_kg").unwrap(),
        )
        .unwrap();
        assert!(out.retried);
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        assert_eq!(out.summary, "The bar is forged; hardness rises.");
        assert_eq!(out.graph.node("forging").unwrap().category.as_deref(), Some("process"));
    }

    #[test]
    fn gen2_fails_after_second_bad_answer() {
        let backend = Scripted::new(vec![("Summary:", "nope"), ("forged", "summary text")]);
        let doc = parse_document(DOC, TextFormat::Markdown).unwrap();
        let err = gen2_extract(
            &doc,
            &gateway(backend.clone()),
            &ProviderConfig::openai("m"),
            &builtin_template("process_summary").unwrap(),
            &builtin_template("summary_to_kg").unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::ParseFailure { .. }));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gen2_empty_document() {
        let doc = Document { id: "e".into(), title: String::new(), sections: vec![], figures: vec![], diagnostics: vec![] };
        let err = gen2_extract(
            &doc,
            &gateway(Scripted::new(vec![])),
            &ProviderConfig::openai("m"),
            &builtin_template("process_summary").unwrap(),
            &builtin_template("summary_to_kg").unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::EmptyInput));
    }
}
