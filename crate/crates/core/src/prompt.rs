//! Three-part prompts: instruction, context, and an input section holding the
//! `{input}` slot.
//!
//! Templates live in a small text format, one file per template:
//!
//! ```text
//! name: structural_extraction
//! contract: markdown_tables
//! chain_of_thought: false
//!
//! [instruction]
//! ...
//!
//! [context]
//! ...
//!
//! [input]
//! Text:
//! {input}
//! ```
//!
//! `{name}` placeholders are substituted at render time; `{{` and `}}` are
//! literal braces.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INPUT_SLOT: &str = "input";

const CHAIN_OF_THOUGHT_SUFFIX: &str =
    "Work through the task step by step before writing the final answer, and keep the final answer in the required format.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no binding for placeholder `{{{name}}}`")]
    UnboundPlaceholder { name: String },
    #[error("template `{0}` not found")]
    NotFound(String),
    #[error("template format error on line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("template must contain the `{{input}}` slot exactly once in its input section (found {0})")]
    InputSlot(usize),
    #[error("input text is empty")]
    EmptyInput,
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputContract {
    MarkdownTables,
    PlainSummary,
    KgJson,
}

impl OutputContract {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputContract::MarkdownTables => "markdown_tables",
            OutputContract::PlainSummary => "plain_summary",
            OutputContract::KgJson => "kg_json",
        }
    }
}

impl fmt::Display for OutputContract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutputContract {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown_tables" => Ok(OutputContract::MarkdownTables),
            "plain_summary" => Ok(OutputContract::PlainSummary),
            "kg_json" => Ok(OutputContract::KgJson),
            other => Err(format!("unknown output contract `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    instruction: String,
    context: String,
    input: String,
    output_contract: OutputContract,
    chain_of_thought: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_name: String,
    pub text: String,
    pub variable_bindings: BTreeMap<String, String>,
    pub output_contract: OutputContract,
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits template text into literal runs and `{name}` placeholders.
fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push(Piece::Literal(&text[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push(Piece::Literal(&text[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'{' => match text[i + 1..].find('}') {
                Some(len) if is_ident(&text[i + 1..i + 1 + len]) => {
                    out.push(Piece::Literal(&text[lit_start..i]));
                    out.push(Piece::Placeholder(&text[i + 1..i + 1 + len]));
                    i += len + 2;
                    lit_start = i;
                }
                _ => i += 1,
            },
            _ => i += 1,
        }
    }
    out.push(Piece::Literal(&text[lit_start..]));
    out
}

fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    pieces(text).into_iter().filter_map(|p| match p {
        Piece::Placeholder(name) => Some(name),
        Piece::Literal(_) => None,
    })
}

fn substitute(text: &str, bindings: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    for piece in pieces(text) {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Placeholder(name) => match bindings.get(name) {
                Some(value) => out.push_str(value),
                None => {
                    return Err(PromptError::UnboundPlaceholder { name: name.to_string() });
                }
            },
        }
    }
    Ok(out)
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        instruction: impl Into<String>,
        context: impl Into<String>,
        input: impl Into<String>,
        output_contract: OutputContract,
    ) -> Result<Self, PromptError> {
        let template = Self {
            name: name.into(),
            instruction: instruction.into(),
            context: context.into(),
            input: input.into(),
            output_contract,
            chain_of_thought: false,
        };
        template.validate()?;
        Ok(template)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let count = |s: &str| placeholders(s).filter(|p| *p == INPUT_SLOT).count();
        let in_input = count(&self.input);
        let elsewhere = count(&self.instruction) + count(&self.context);
        if in_input != 1 || elsewhere != 0 {
            return Err(PromptError::InputSlot(in_input + elsewhere));
        }
        Ok(())
    }

    pub fn with_chain_of_thought(mut self, enabled: bool) -> Self {
        self.chain_of_thought = enabled;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn output_contract(&self) -> OutputContract {
        self.output_contract
    }

    pub fn chain_of_thought(&self) -> bool {
        self.chain_of_thought
    }

    pub fn render(&self, input_text: &str, extra_vars: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        if input_text.trim().is_empty() {
            return Err(PromptError::EmptyInput);
        }
        let mut bindings: BTreeMap<&str, &str> =
            extra_vars.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        bindings.insert(INPUT_SLOT, input_text);

        let mut instruction = substitute(&self.instruction, &bindings)?;
        if self.chain_of_thought {
            instruction.push(' ');
            instruction.push_str(CHAIN_OF_THOUGHT_SUFFIX);
        }
        let context = substitute(&self.context, &bindings)?;
        let input = substitute(&self.input, &bindings)?;

        let mut text = instruction;
        if !context.trim().is_empty() {
            text.push_str("\n\n");
            text.push_str(&context);
        }
        text.push_str("\n\n");
        text.push_str(&input);

        Ok(RenderedPrompt {
            template_name: self.name.clone(),
            text,
            variable_bindings: extra_vars.clone(),
            output_contract: self.output_contract,
        })
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "name: {}\ncontract: {}\nchain_of_thought: {}\n",
            self.name, self.output_contract, self.chain_of_thought
        );
        for (section, body) in [("instruction", &self.instruction), ("context", &self.context), ("input", &self.input)] {
            out.push_str(&format!("\n[{section}]\n"));
            if !body.is_empty() {
                out.push_str(body);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let format_err = |line: usize, message: String| PromptError::Format { line, message };
        let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut sections: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        let mut current: Option<String> = None;

        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let marker = line.trim();
            if let Some(name) = marker.strip_prefix('[').and_then(|m| m.strip_suffix(']')) {
                if matches!(name, "instruction" | "context" | "input") {
                    if sections.contains_key(name) {
                        return Err(format_err(lineno, format!("duplicate section [{name}]")));
                    }
                    sections.insert(name.to_string(), Vec::new());
                    current = Some(name.to_string());
                    continue;
                }
            }
            match &current {
                Some(section) => sections.get_mut(section).expect("opened").push(line),
                None if marker.is_empty() || marker.starts_with('#') => {}
                None => {
                    let (key, value) = marker
                        .split_once(':')
                        .ok_or_else(|| format_err(lineno, format!("expected `key: value`, got `{marker}`")))?;
                    header.insert(key.trim().to_string(), (lineno, value.trim().to_string()));
                }
            }
        }

        let body = |name: &str| -> Result<String, PromptError> {
            let lines = sections
                .get(name)
                .ok_or_else(|| format_err(0, format!("missing section [{name}]")))?;
            Ok(lines.join("\n").trim_matches('\n').to_string())
        };
        let (_, name) = header
            .get("name")
            .cloned()
            .ok_or_else(|| format_err(0, "missing `name`".to_string()))?;
        let (line, contract) = header
            .get("contract")
            .cloned()
            .ok_or_else(|| format_err(0, "missing `contract`".to_string()))?;
        let output_contract = contract.parse().map_err(|m| format_err(line, m))?;
        let chain_of_thought = match header.get("chain_of_thought") {
            None => false,
            Some((_, v)) if v == "true" => true,
            Some((_, v)) if v == "false" => false,
            Some((line, v)) => return Err(format_err(*line, format!("chain_of_thought must be true|false, got `{v}`"))),
        };

        let template = PromptTemplate::new(name, body("instruction")?, body("context")?, body("input")?, output_contract)?;
        Ok(template.with_chain_of_thought(chain_of_thought))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

const BUILTIN_SOURCES: [&str; 4] = [
    include_str!("../templates/structural_extraction.tmpl"),
    include_str!("../templates/relation_extraction.tmpl"),
    include_str!("../templates/process_summary.tmpl"),
    include_str!("../templates/summary_to_kg.tmpl"),
];

/// Raw file text of the shipped templates, in [`builtin_templates`] order.
pub fn builtin_template_sources() -> &'static [&'static str] {
    &BUILTIN_SOURCES
}

pub fn builtin_templates() -> Vec<PromptTemplate> {
    BUILTIN_SOURCES
        .iter()
        .map(|src| PromptTemplate::parse(src).expect("shipped template is valid"))
        .collect()
}

pub fn builtin_template(name: &str) -> Result<PromptTemplate, PromptError> {
    builtin_templates()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| PromptError::NotFound(name.to_string()))
}

/// Resolves `name_or_path`: an existing file path first, then
/// `<templates_dir>/<name>.tmpl`, then the shipped set.
pub fn resolve_template(name_or_path: &str, templates_dir: Option<&Path>) -> Result<PromptTemplate, PromptError> {
    let as_path = Path::new(name_or_path);
    if as_path.is_file() {
        return PromptTemplate::load(as_path);
    }
    if let Some(dir) = templates_dir {
        let candidate = dir.join(format!("{name_or_path}.tmpl"));
        if candidate.is_file() {
            return PromptTemplate::load(&candidate);
        }
    }
    builtin_template(name_or_path)
}
