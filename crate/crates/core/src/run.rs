//! Command implementations shared by the `matkg` binary and the Python
//! bindings. Every command writes its artifacts atomically under the output
//! directory and finishes with a `manifest-<command>.json` listing them.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extract::{parse_markdown_tables, records_to_csv, records_to_json, ExtractError, PropertyTable};
use crate::gateway::{
    ChatBackend, ChatMessage, ChatRequest, FixtureStore, FixtureSummary, Gateway, GatewayError, HttpBackend, Mode,
    NoNetwork, ProviderConfig,
};
use crate::graph::{
    export_dot, gen1_extract, gen2_extract, parse_kg_json, rubric_report, serialize_kg_json, GraphError,
    KnowledgeGraph, Pipeline, PipelineError, RubricReport,
};
use crate::ingest::{parse_document_with, Document, IngestError, NormalizationPolicy, ParseOptions, TextFormat};
use crate::prompt::{resolve_template, PromptError};
use crate::rouge::{evaluate_corpus, match_report, CorpusManifest, CorpusReport, EvalError, MatchReport};

pub const GEN1_TEMPLATE: &str = "relation_extraction";
pub const SUMMARY_TEMPLATE: &str = "process_summary";
pub const SUMMARY_KG_TEMPLATE: &str = "summary_to_kg";
pub const TABLES_TEMPLATE: &str = "structural_extraction";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    FileUnwritable { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{error}")]
    Extract { error: ExtractError, diagnostics: Vec<String> },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{stage}: could not parse model output: {message}")]
    Contract { stage: String, message: String },
    #[error(transparent)]
    Eval(EvalError),
}

impl RunError {
    /// 2 input error, 3 provider error, 4 parse or contract failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Gateway(_) => 3,
            RunError::Extract { .. } | RunError::Graph(_) | RunError::Contract { .. } => 4,
            RunError::Eval(EvalError::Csv(_)) => 4,
            _ => 2,
        }
    }
}

impl From<PipelineError> for RunError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway(g) => RunError::Gateway(g),
            PipelineError::Prompt(p) => RunError::Prompt(p),
            PipelineError::EmptyInput => RunError::Ingest(IngestError::EmptyInput),
            PipelineError::ParseFailure { stage, message } => RunError::Contract { stage, message },
        }
    }
}

impl From<EvalError> for RunError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::FileUnreadable { path, source } => RunError::FileUnreadable { path, source },
            other => RunError::Eval(other),
        }
    }
}

fn default_mode() -> Mode {
    Mode::Replay
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub provider: ProviderConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub normalization: NormalizationPolicy,
}

const SECRET_KEYS: [&str; 4] = ["api_key", "apikey", "key", "token"];

fn reject_secrets(value: &serde_json::Value, path: &str) -> Result<(), RunError> {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let lowered = k.to_ascii_lowercase().replace('-', "_");
                if SECRET_KEYS.contains(&lowered.as_str()) || lowered.ends_with("_secret") {
                    return Err(RunError::Config(format!(
                        "`{path}{k}` looks like a credential; put the key in an environment variable and name it in provider.api_key_env"
                    )));
                }
                reject_secrets(v, &format!("{path}{k}."))?;
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                reject_secrets(v, path)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn is_env_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Expands `${VAR}` or `${VAR:-default}` in `api_key_env`. The result must
/// itself be a variable name, so a key value can never be smuggled in.
pub fn resolve_key_name(raw: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, RunError> {
    let name = match raw.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
        None => raw.to_string(),
        Some(inner) => {
            let (var, fallback) = match inner.split_once(":-") {
                Some((v, d)) => (v, Some(d)),
                None => (inner, None),
            };
            if !is_env_name(var) {
                return Err(RunError::Config(format!("bad interpolation `{raw}` in api_key_env")));
            }
            match (lookup(var).filter(|v| !v.is_empty()), fallback) {
                (Some(v), _) => v,
                (None, Some(d)) => d.to_string(),
                (None, None) => return Err(RunError::Config(format!("api_key_env refers to unset variable `{var}`"))),
            }
        }
    };
    if !is_env_name(&name) {
        return Err(RunError::Config("api_key_env must name an environment variable".into()));
    }
    Ok(name)
}

impl RunConfig {
    pub fn new(provider: ProviderConfig) -> Self {
        Self {
            provider,
            mode: default_mode(),
            templates_dir: None,
            fixtures_dir: None,
            output_dir: default_output_dir(),
            normalization: NormalizationPolicy::default(),
        }
    }

    /// Parses config JSON. Relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, RunError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| RunError::Config(format!("invalid JSON: {e}")))?;
        reject_secrets(&value, "")?;
        let mut config: RunConfig = serde_json::from_value(value).map_err(|e| RunError::Config(e.to_string()))?;
        config.provider.api_key_env = resolve_key_name(&config.provider.api_key_env, |v| std::env::var(v).ok())?;
        for dir in [&mut config.templates_dir, &mut config.fixtures_dir].into_iter().flatten() {
            *dir = base.join(&*dir);
        }
        config.output_dir = base.join(&config.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = read_text(path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.mode != Mode::Live && self.fixtures_dir.is_none() {
            return Err(RunError::Config(format!("{:?} mode requires fixtures_dir", self.mode).to_lowercase()));
        }
        self.provider.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical config JSON.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_text(path: &Path) -> Result<String, RunError> {
    std::fs::read_to_string(path).map_err(|source| RunError::FileUnreadable { path: path.to_path_buf(), source })
}

/// Temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let unwritable = |source| RunError::FileUnwritable { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(unwritable)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(unwritable)?;
    tmp.write_all(bytes).map_err(unwritable)?;
    tmp.persist(path).map_err(|e| unwritable(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub timestamp: String,
    pub config_digest: String,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileDigest>,
    pub diagnostics: Vec<String>,
}

/// Collects the artifacts of one command and writes its manifest last.
struct RunRecorder<'a> {
    runner: &'a Runner,
    command: &'static str,
    inputs: Vec<FileDigest>,
    artifacts: Vec<FileDigest>,
    diagnostics: Vec<String>,
}

impl<'a> RunRecorder<'a> {
    fn new(runner: &'a Runner, command: &'static str) -> Self {
        Self { runner, command, inputs: Vec::new(), artifacts: Vec::new(), diagnostics: Vec::new() }
    }

    fn input(&mut self, path: &Path) -> Result<String, RunError> {
        let text = read_text(path)?;
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
        Ok(text)
    }

    fn write(&mut self, relative: impl AsRef<Path>, contents: &str) -> Result<PathBuf, RunError> {
        let relative = relative.as_ref();
        let path = self.runner.config.output_dir.join(relative);
        write_atomic(&path, contents.as_bytes())?;
        self.artifacts.push(FileDigest {
            path: relative.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(path)
    }

    fn finish(self) -> Result<RunManifest, RunError> {
        let config_digest = self.runner.config.digest();
        let mut id_input = format!("{}\n{config_digest}\n", self.command);
        for f in &self.inputs {
            id_input.push_str(&f.sha256);
            id_input.push('\n');
        }
        let manifest = RunManifest {
            run_id: sha256_hex(id_input.as_bytes())[..16].to_string(),
            command: self.command.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config_digest,
            inputs: self.inputs,
            artifacts: self.artifacts,
            diagnostics: self.diagnostics,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.runner.config.output_dir.join(format!("manifest-{}.json", self.command));
        write_atomic(&path, text.as_bytes())?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub document: Document,
    pub path: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone)]
pub struct ExtractOutput {
    pub tables: Vec<PropertyTable>,
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone)]
pub struct KgOutput {
    pub summary: Option<String>,
    pub graph: KnowledgeGraph,
    pub rubric: RubricReport,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone)]
pub struct CorpusOutput {
    pub report: CorpusReport,
    pub manifest: RunManifest,
}

pub struct Runner {
    config: RunConfig,
    gateway: Gateway,
}

impl Runner {
    /// Production wiring: HTTP backend for live and cache modes, no network
    /// at all in replay mode.
    pub fn new(config: RunConfig) -> Result<Self, RunError> {
        let backend: Arc<dyn ChatBackend> = match config.mode {
            Mode::Replay => Arc::new(NoNetwork),
            Mode::Live | Mode::Cache => Arc::new(HttpBackend::default()),
        };
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: RunConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, RunError> {
        config.validate()?;
        let store = config.fixtures_dir.clone().map(FixtureStore::new);
        let gateway = Gateway::new(config.mode, store, backend)?;
        Ok(Self { config, gateway })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn template(&self, name: &str) -> Result<crate::prompt::PromptTemplate, RunError> {
        Ok(resolve_template(name, self.config.templates_dir.as_deref())?)
    }

    fn document_from(recorder: &mut RunRecorder<'_>, path: &Path) -> Result<Document, RunError> {
        let text = recorder.input(path)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".json") {
            return serde_json::from_str(&text)
                .map_err(|e| RunError::Input(format!("{}: not a document JSON file: {e}", path.display())));
        }
        let format = TextFormat::from_extension(path.extension().and_then(|e| e.to_str()).unwrap_or_default());
        let options = ParseOptions { id: Some(document_id(path)), ..ParseOptions::default() };
        Ok(parse_document_with(&text, format, &options)?)
    }

    pub fn ingest(&self, input: &Path, format: Option<TextFormat>) -> Result<IngestOutput, RunError> {
        let mut rec = RunRecorder::new(self, "ingest");
        let text = rec.input(input)?;
        let format = format
            .unwrap_or_else(|| TextFormat::from_extension(input.extension().and_then(|e| e.to_str()).unwrap_or_default()));
        let options = ParseOptions { id: Some(document_id(input)), ..ParseOptions::default() };
        let document = parse_document_with(&text, format, &options)?;
        rec.diagnostics.extend(document.diagnostics.iter().cloned());
        let mut json = serde_json::to_string_pretty(&document).expect("document serializes");
        json.push('\n');
        let path = rec.write(format!("{}.doc.json", document.id), &json)?;
        let manifest = rec.finish()?;
        Ok(IngestOutput { document, path, manifest })
    }

    /// Table extraction, one call per content section.
    pub fn extract(&self, doc_path: &Path, template: Option<&str>) -> Result<ExtractOutput, RunError> {
        let mut rec = RunRecorder::new(self, "extract");
        let document = Self::document_from(&mut rec, doc_path)?;
        if document.is_empty() {
            return Err(RunError::Ingest(IngestError::EmptyInput));
        }
        let template = self.template(template.unwrap_or(TABLES_TEMPLATE))?;
        let mut tables = Vec::new();
        for section in document.content_sections() {
            let prompt = template.render(&section.paragraphs.join("\n\n"), &BTreeMap::new())?;
            let request = ChatRequest::from_prompt(self.config.provider.clone(), &prompt)?;
            let answer = self.gateway.complete(&request)?;
            match parse_markdown_tables(&answer.content) {
                Ok(found) => {
                    for mut table in found {
                        for note in &table.repair_notes {
                            rec.diagnostics.push(format!("section `{}`: {}: {note}", section.heading, table.title));
                        }
                        for record in &mut table.records {
                            record.source_section = Some(section.heading.clone());
                        }
                        tables.push(table);
                    }
                }
                Err(e) => rec.diagnostics.push(format!("section `{}`: {e}", section.heading)),
            }
        }
        if tables.is_empty() {
            return Err(RunError::Extract { error: ExtractError::NoTablesFound, diagnostics: rec.diagnostics });
        }
        let json_path = rec.write(format!("{}.tables.json", document.id), &records_to_json(&tables))?;
        let csv = records_to_csv(&tables).map_err(|error| RunError::Extract { error, diagnostics: Vec::new() })?;
        let csv_path = rec.write(format!("{}.tables.csv", document.id), &csv)?;
        let manifest = rec.finish()?;
        Ok(ExtractOutput { tables, json_path, csv_path, manifest })
    }

    /// Builds a graph with one strategy and writes it under `<out>/<strategy>/`.
    pub fn kg(&self, doc_path: &Path, strategy: Pipeline) -> Result<KgOutput, RunError> {
        let mut rec = RunRecorder::new(self, strategy_command(strategy));
        let document = Self::document_from(&mut rec, doc_path)?;
        let dir_name = match strategy {
            Pipeline::Gen1 => "gen1",
            Pipeline::Gen2 => "gen2",
        };
        let provider = &self.config.provider;
        let (summary, graph) = match strategy {
            Pipeline::Gen1 => {
                let out = gen1_extract(&document, &self.gateway, provider, &self.template(GEN1_TEMPLATE)?)?;
                rec.diagnostics.extend(out.diagnostics);
                (None, out.graph)
            }
            Pipeline::Gen2 => {
                let out = gen2_extract(
                    &document,
                    &self.gateway,
                    provider,
                    &self.template(SUMMARY_TEMPLATE)?,
                    &self.template(SUMMARY_KG_TEMPLATE)?,
                )?;
                rec.diagnostics.extend(out.diagnostics);
                (Some(out.summary), out.graph)
            }
        };
        let dir = Path::new(dir_name);
        if let Some(s) = &summary {
            rec.write(dir.join("summary.txt"), &format!("{s}\n"))?;
        }
        rec.write(dir.join("kg.json"), &serialize_kg_json(&graph))?;
        rec.write(dir.join("kg.dot"), &export_dot(&graph))?;
        let rubric = rubric_report(&graph, &document);
        let mut rubric_json = serde_json::to_string_pretty(&rubric).expect("rubric serializes");
        rubric_json.push('\n');
        rec.write(dir.join("rubric.json"), &rubric_json)?;
        rec.write(dir.join("rubric.txt"), &rubric.to_text())?;
        let manifest = rec.finish()?;
        Ok(KgOutput { summary, graph, rubric, dir: self.config.output_dir.join(dir), manifest })
    }

    /// Renders a KG JSON file as DOT. Writes to `output` when given, else to
    /// `<out>/<stem>.dot`.
    pub fn export_dot(&self, kg_path: &Path, output: Option<&Path>) -> Result<(PathBuf, RunManifest), RunError> {
        let mut rec = RunRecorder::new(self, "export-dot");
        let graph = parse_kg_json(&rec.input(kg_path)?)?;
        let dot = export_dot(&graph);
        let path = match output {
            Some(p) => {
                write_atomic(p, dot.as_bytes())?;
                rec.artifacts.push(FileDigest { path: p.display().to_string(), sha256: sha256_hex(dot.as_bytes()) });
                p.to_path_buf()
            }
            None => {
                let stem = kg_path.file_stem().and_then(|s| s.to_str()).unwrap_or("kg");
                rec.write(format!("{stem}.dot"), &dot)?
            }
        };
        Ok((path, rec.finish()?))
    }

    pub fn eval_corpus(&self, manifest_path: &Path) -> Result<CorpusOutput, RunError> {
        let mut rec = RunRecorder::new(self, "eval-corpus");
        rec.input(manifest_path)?;
        let corpus = CorpusManifest::load(manifest_path)?;
        for pair in &corpus.pairs {
            rec.input(&pair.reference_path)?;
            rec.input(&pair.candidate_path)?;
        }
        let policy = corpus.policy.clone().unwrap_or_else(|| self.config.normalization.clone());
        let report = evaluate_corpus(&corpus.pairs, &policy)?;
        rec.write("report.txt", &report.to_text())?;
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        rec.write("report.json", &json)?;
        rec.write("report.csv", &report.to_csv()?)?;
        Ok(CorpusOutput { report, manifest: rec.finish()? })
    }

    /// Sends one raw prompt through the gateway in cache mode, so the answer
    /// is recorded if it was not already. Returns the fixture digest.
    pub fn record_prompt(&self, prompt: &str) -> Result<String, RunError> {
        let request = ChatRequest::new(self.config.provider.clone(), vec![ChatMessage::user(prompt)])?;
        self.gateway.complete(&request)?;
        Ok(crate::gateway::request_digest(&request))
    }

    pub fn list_fixtures(&self) -> Result<Vec<FixtureSummary>, RunError> {
        match self.gateway.store() {
            Some(store) => Ok(store.list()?),
            None => Err(RunError::Config("no fixtures_dir configured".into())),
        }
    }
}

fn strategy_command(strategy: Pipeline) -> &'static str {
    match strategy {
        Pipeline::Gen1 => "kg-gen1",
        Pipeline::Gen2 => "kg-gen2",
    }
}

/// Document id from a file name: the stem without `.doc`.
pub fn document_id(path: &Path) -> String {
    let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or("doc");
    let stem = stem.split('.').next().filter(|s| !s.is_empty()).unwrap_or("doc");
    stem.to_string()
}

/// Single-pair evaluation; reads both files.
pub fn eval_pair(reference: &Path, candidate: &Path, policy: &NormalizationPolicy) -> Result<MatchReport, RunError> {
    Ok(match_report(&read_text(reference)?, &read_text(candidate)?, policy))
}

pub fn load_policy(path: &Path) -> Result<NormalizationPolicy, RunError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}
