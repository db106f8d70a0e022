use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use matkg_core::gateway::{BackendReply, ChatRequest, ChatResponse, FixtureStore, ProviderConfig};
use matkg_core::prompt::builtin_template;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn matkg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matkg"))
        .args(args)
        .env_remove("MATKG_KEY_VAR")
        .output()
        .expect("binary runs")
}

fn ti64_config() -> String {
    root().join("fixtures/ti64/config.json").display().to_string()
}

fn ti64_doc() -> String {
    root().join("fixtures/ti64/ti64.md").display().to_string()
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        std::fs::copy(&path, to.join(path.file_name().unwrap())).unwrap();
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ingest_markdown_and_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = matkg(&["--out", out, "ingest", &ti64_doc()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ti64.doc.json")).unwrap()).unwrap();
    assert!(!doc["sections"].as_array().unwrap().is_empty());
    assert!(tmp.path().join("manifest-ingest.json").is_file());

    let o = matkg(&["--out", out, "ingest", "does/not/exist.md"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read"));
}

#[test]
fn forging_paragraph_ingests_to_one_section() {
    let tmp = tempfile::tempdir().unwrap();
    let input = root().join("fixtures/forging/input.txt");
    let o = matkg(&["--out", tmp.path().to_str().unwrap(), "ingest", input.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("Fig. 1"));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("input.doc.json")).unwrap()).unwrap();
    assert_eq!(doc["sections"].as_array().unwrap().len(), 1);
    assert_eq!(doc["figures"].as_array().unwrap().len(), 0);
}

#[test]
fn replay_extract_finds_tensile_strength() {
    let tmp = tempfile::tempdir().unwrap();
    let o = matkg(&["--config", &ti64_config(), "--out", tmp.path().to_str().unwrap(), "extract", &ti64_doc()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json = std::fs::read_to_string(tmp.path().join("ti64.tables.json")).unwrap();
    let tables = matkg_core::extract::records_from_json(&json).unwrap();
    let hit = tables
        .iter()
        .flat_map(|t| &t.records)
        .find(|r| r.key == "Tensile Strength")
        .unwrap();
    assert_eq!((hit.numeric_value, hit.unit.as_deref()), (Some(920.0), Some("MPa")));
    assert!(tmp.path().join("ti64.tables.csv").is_file());
    assert!(stderr(&o).contains("Conclusions"));
}

#[test]
fn live_mode_without_key_fails_before_network() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"provider": {"provider_name": "openai", "endpoint_url": "http://127.0.0.1:9/v1/chat/completions",
            "model_id": "gpt-3.5-turbo-1106", "api_key_env": "MATKG_TEST_KEY_THAT_IS_NEVER_SET"}, "mode": "live"}"#,
    )
    .unwrap();
    let o = matkg(&["--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "extract", &ti64_doc()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("MATKG_TEST_KEY_THAT_IS_NEVER_SET"), "{}", stderr(&o));
}

#[test]
fn inline_api_key_in_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"provider": {"provider_name": "openai", "endpoint_url": "https://api.openai.com/v1/chat/completions",
            "model_id": "m", "api_key_env": "OPENAI_API_KEY", "api_key": "sk-secret-value"}, "mode": "live"}"#,
    )
    .unwrap();
    let o = matkg(&["--config", config.to_str().unwrap(), "fixtures", "list"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).contains("sk-secret-value"));
}

#[test]
fn free_text_answer_exits_with_contract_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = tmp.path().join("note.txt");
    let body = "The specimens were annealed at 700 C for 2 h.";
    std::fs::write(&doc, body).unwrap();

    let provider = ProviderConfig::openai("gpt-3.5-turbo-1106");
    let prompt = builtin_template("structural_extraction").unwrap().render(body, &BTreeMap::new()).unwrap();
    let request = ChatRequest::from_prompt(provider.clone(), &prompt).unwrap();
    let content = "The text mentions an anneal but I cannot build a table.".to_string();
    let reply = BackendReply {
        response: ChatResponse { content, prompt_tokens: 1, completion_tokens: 1, latency_ms: 0, from_cache: false },
        raw: serde_json::Value::Null,
    };
    FixtureStore::new(tmp.path().join("fx")).record(&request, &reply).unwrap();

    let config = tmp.path().join("config.json");
    let cfg = serde_json::json!({"provider": provider, "mode": "replay", "fixtures_dir": "fx", "output_dir": "out"});
    std::fs::write(&config, cfg.to_string()).unwrap();
    let o = matkg(&["--config", config.to_str().unwrap(), "extract", doc.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("no markdown tables"));
    assert!(!tmp.path().join("out/note.tables.json").exists());
}

#[test]
fn corrupted_section_fixture_becomes_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let fixtures = tmp.path().join("fixtures");
    copy_dir(&root().join("fixtures/ti64/fixtures"), &fixtures);
    let mut corrupted = 0;
    for entry in std::fs::read_dir(&fixtures).unwrap() {
        let path = entry.unwrap().path();
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let prompt = v["request"]["messages"][0]["content"].as_str().unwrap().to_string();
        if prompt.starts_with("Identify the relationships") && prompt.contains("ductile dimples") {
            v["response"]["content"] = "[{\"head\": \"tensile tests\", \"relation\": ".into();
            std::fs::write(&path, v.to_string()).unwrap();
            corrupted += 1;
        }
    }
    assert_eq!(corrupted, 1);
    let config = tmp.path().join("config.json");
    std::fs::copy(root().join("fixtures/ti64/config.json"), &config).unwrap();

    let o = matkg(&["--config", config.to_str().unwrap(), "kg", &ti64_doc(), "--strategy", "gen1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/manifest-kg-gen1.json")).unwrap()).unwrap();
    let diagnostics = manifest["diagnostics"].as_array().unwrap();
    assert_eq!(diagnostics.len(), 1);
    assert!(diagnostics[0].as_str().unwrap().contains("Results"));
    let kg = std::fs::read_to_string(tmp.path().join("out/gen1/kg.json")).unwrap();
    let graph = matkg_core::graph::parse_kg_json(&kg).unwrap();
    assert!(graph.edge_count() > 0);
    assert!(graph.node("tensile tests").is_none());
}

#[test]
fn kg_gen2_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = matkg(&["--config", &ti64_config(), "--out", out, "kg", &ti64_doc(), "--strategy", "gen2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["summary.txt", "kg.json", "kg.dot", "rubric.json", "rubric.txt"] {
        assert!(tmp.path().join("gen2").join(name).is_file(), "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest-kg-gen2.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 5);

    let kg = tmp.path().join("gen2/kg.json");
    let dot = tmp.path().join("graph.dot");
    let o = matkg(&["--out", out, "export-dot", kg.to_str().unwrap(), "--output", dot.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&dot).unwrap(), std::fs::read(tmp.path().join("gen2/kg.dot")).unwrap());
}

#[test]
fn kg_on_empty_document_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = tmp.path().join("empty.doc.json");
    std::fs::write(&doc, r#"{"id": "empty", "title": "", "sections": [], "figures": []}"#).unwrap();
    let o = matkg(&["--config", &ti64_config(), "--out", tmp.path().to_str().unwrap(), "kg", doc.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"));
}

#[test]
fn eval_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let manifest = root().join("fixtures/eval/manifest.json");
    let o = matkg(&["--out", out, "eval-corpus", "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["report.txt", "report.json", "report.csv"] {
        assert!(tmp.path().join(name).is_file(), "{name}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("Average"));

    let text = root().join("fixtures/forging/input.txt");
    let o = matkg(&["eval", "--ref", text.to_str().unwrap(), "--cand", text.to_str().unwrap()]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let json: serde_json::Value = serde_json::from_str(&stdout[stdout.find('{').unwrap()..]).unwrap();
    assert_eq!(json["relaxed"]["f1"], 1.0);
}

#[test]
fn fixtures_list() {
    let o = matkg(&["--config", &ti64_config(), "fixtures", "list"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 10);
}
