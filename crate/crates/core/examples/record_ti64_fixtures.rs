//! Regenerates `fixtures/ti64/fixtures/` and `fixtures/ti64/golden_digests.json`.
//!
//! Model answers come from `fixtures/ti64/responses/`, chosen by which
//! template and which section a prompt carries. Run from the workspace root:
//!
//!     cargo run -p matkg-core --example record_ti64_fixtures

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use matkg_core::gateway::{BackendReply, ChatBackend, ChatRequest, ChatResponse, GatewayError, Mode};
use matkg_core::graph::Pipeline;
use matkg_core::run::{sha256_hex, RunConfig, Runner};

const RULES: &[(&str, &str, &str)] = &[
    ("You extract structured data", "uniaxial tension", "extract_abstract.md"),
    ("You extract structured data", "Wyman Gordon", "extract_methods.md"),
    ("You extract structured data", "ductile dimples", "extract_results.md"),
    ("You extract structured data", "governs ductile fracture", "extract_conclusions.txt"),
    ("Identify the relationships", "uniaxial tension", "gen1_abstract.json"),
    ("Identify the relationships", "Wyman Gordon", "gen1_methods.json"),
    ("Identify the relationships", "ductile dimples", "gen1_results.json"),
    ("Identify the relationships", "governs ductile fracture", "gen1_conclusions.json"),
    ("Summarize the research text", "", "gen2_summary.txt"),
    ("Convert the research summary", "", "gen2_kg.json"),
];

struct Scripted {
    responses: PathBuf,
}

impl ChatBackend for Scripted {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let prompt = &request.messages[0].content;
        let (_, _, file) = RULES
            .iter()
            .find(|(template, section, _)| prompt.starts_with(template) && prompt.contains(section))
            .ok_or_else(|| GatewayError::Transport(format!("no scripted answer for: {prompt:.80}")))?;
        let content = std::fs::read_to_string(self.responses.join(file))
            .map_err(|e| GatewayError::Transport(format!("{file}: {e}")))?;
        let prompt_tokens = prompt.split_whitespace().count() as u64;
        let completion_tokens = content.split_whitespace().count() as u64;
        let raw = serde_json::json!({
            "object": "chat.completion",
            "model": request.config.model_id,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
        });
        Ok(BackendReply {
            response: ChatResponse { content, prompt_tokens, completion_tokens, latency_ms: 0, from_cache: false },
            raw,
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new("fixtures/ti64");
    let fixtures = root.join("fixtures");
    if fixtures.is_dir() {
        std::fs::remove_dir_all(&fixtures)?;
    }
    let doc = root.join("ti64.md");
    let scratch = tempfile::tempdir()?;

    let mut config = RunConfig::load(&root.join("config.json"))?;
    config.mode = Mode::Cache;
    config.output_dir = scratch.path().join("record");
    let recorder = Runner::with_backend(config.clone(), Arc::new(Scripted { responses: root.join("responses") }))?;
    recorder.extract(&doc, None)?;
    recorder.kg(&doc, Pipeline::Gen1)?;
    recorder.kg(&doc, Pipeline::Gen2)?;
    println!("recorded {} fixtures", recorder.list_fixtures()?.len());

    config.mode = Mode::Replay;
    config.output_dir = scratch.path().join("replay");
    let replay = Runner::new(config)?;
    let ingested = replay.ingest(&doc, None)?;
    let kg = replay.kg(&ingested.path, Pipeline::Gen2)?;
    let (dot, export) = replay.export_dot(&kg.dir.join("kg.json"), None)?;

    let mut golden = BTreeMap::new();
    for manifest in [&ingested.manifest, &kg.manifest, &export] {
        for artifact in &manifest.artifacts {
            golden.insert(artifact.path.clone(), artifact.sha256.clone());
        }
    }
    assert_eq!(golden.get("kg.dot"), Some(&sha256_hex(&std::fs::read(&dot)?)));
    let mut text = serde_json::to_string_pretty(&golden)?;
    text.push('\n');
    std::fs::write(root.join("golden_digests.json"), text)?;
    println!("wrote {} golden digests", golden.len());
    Ok(())
}
