//! Section-structured documents from pre-extracted paper text.
//!
//! Two input flavours are understood: markdown, where ATX headings open
//! sections, and plain text, where numbered headings ("2.1 Results") or short
//! ALL-CAPS lines do. Anything before the first heading is collected in a
//! synthetic `_preamble` section.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Heading used for text that precedes the first real heading.
pub const PREAMBLE_HEADING: &str = "_preamble";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("invalid heading pattern: {0}")]
    InvalidPattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextFormat {
    Plain,
    Markdown,
}

impl TextFormat {
    /// Picks a format from a file extension, defaulting to plain text.
    pub fn from_extension(ext: &str) -> Self {
        match ext.to_ascii_lowercase().as_str() {
            "md" | "markdown" => TextFormat::Markdown,
            _ => TextFormat::Plain,
        }
    }
}

impl std::str::FromStr for TextFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" | "txt" => Ok(TextFormat::Plain),
            "markdown" | "md" => Ok(TextFormat::Markdown),
            other => Err(format!("unknown format `{other}` (expected plain|markdown)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub sections: Vec<Section>,
    #[serde(default)]
    pub figures: Vec<FigureRef>,
    /// Non-fatal findings, e.g. figure mentions with no caption definition.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub level: u8,
    pub paragraphs: Vec<String>,
    #[serde(default)]
    pub figure_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureRef {
    pub label: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_path: Option<String>,
}

impl Document {
    pub fn is_empty(&self) -> bool {
        self.sections.iter().all(|s| s.paragraphs.is_empty())
    }

    /// Sections that carry at least one paragraph.
    pub fn content_sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| !s.paragraphs.is_empty())
    }

    /// Full body text with headings, suitable as a single prompt input.
    pub fn full_text(&self) -> String {
        let mut out = String::new();
        for section in self.content_sections() {
            if section.heading != PREAMBLE_HEADING {
                let _ = writeln!(out, "{}\n", section.heading);
            }
            for p in &section.paragraphs {
                let _ = writeln!(out, "{p}\n");
            }
        }
        out.trim_end().to_string()
    }

    /// Serializes the section tree as markdown. Parsing the result with
    /// [`TextFormat::Markdown`] reproduces this document.
    pub fn to_markdown(&self) -> String {
        let mut blocks: Vec<String> = Vec::new();
        for section in &self.sections {
            if section.heading != PREAMBLE_HEADING {
                let hashes = "#".repeat(section.level.clamp(1, 6) as usize);
                blocks.push(format!("{hashes} {}", section.heading));
            }
            blocks.extend(section.paragraphs.iter().cloned());
        }
        let mut out = blocks.join("\n\n");
        out.push('\n');
        out
    }

    /// Labels mentioned in paragraphs that have no matching caption.
    pub fn undefined_figure_mentions(&self) -> Vec<String> {
        let defined: BTreeSet<String> = self
            .figures
            .iter()
            .filter_map(|f| figure_number(&f.label))
            .collect();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for section in &self.sections {
            for label in &section.figure_labels {
                let known = figure_number(label).is_some_and(|n| defined.contains(&n));
                if !known && seen.insert(label.clone()) {
                    out.push(label.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    pub strip_punctuation: BTreeSet<char>,
    pub lowercase: bool,
    pub collapse_whitespace: bool,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        Self {
            strip_punctuation: ['.', ',', ';'].into_iter().collect(),
            lowercase: true,
            collapse_whitespace: true,
        }
    }
}

pub fn normalize_text(text: &str, policy: &NormalizationPolicy) -> String {
    let lowered;
    let text = if policy.lowercase {
        lowered = text.to_lowercase();
        lowered.as_str()
    } else {
        text
    };
    let stripped: String = text
        .chars()
        .filter(|c| !policy.strip_punctuation.contains(c))
        .collect();
    if policy.collapse_whitespace {
        stripped.split_whitespace().collect::<Vec<_>>().join(" ")
    } else {
        stripped.trim().to_string()
    }
}

/// Splits a body of text on blank lines. Each paragraph is trimmed and empty
/// ones are dropped.
pub fn segment_paragraphs(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            flush_paragraph(&mut current, &mut out);
        } else {
            current.push(line);
        }
    }
    flush_paragraph(&mut current, &mut out);
    out
}

fn flush_paragraph(lines: &mut Vec<&str>, out: &mut Vec<String>) {
    if lines.is_empty() {
        return;
    }
    let joined = lines.join("\n");
    let trimmed = joined.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
    lines.clear();
}

/// Heading detection rules for plain-text input.
#[derive(Debug, Clone)]
pub struct PlainHeadingRules {
    pub numbered: Regex,
    pub allcaps_max_words: usize,
}

impl Default for PlainHeadingRules {
    fn default() -> Self {
        Self {
            numbered: NUMBERED_HEADING.clone(),
            allcaps_max_words: 8,
        }
    }
}

impl PlainHeadingRules {
    /// Custom numbered-heading pattern. The first capture group, if any, is
    /// the dotted section number used to derive the level.
    pub fn with_pattern(pattern: &str) -> Result<Self, IngestError> {
        let numbered = Regex::new(pattern).map_err(|e| IngestError::InvalidPattern(e.to_string()))?;
        Ok(Self { numbered, ..Self::default() })
    }

    fn heading_level(&self, line: &str) -> Option<u8> {
        let line = line.trim();
        if line.is_empty() || line.len() > 120 {
            return None;
        }
        let sentence_like = line.ends_with(['.', ',', ';', ':', '!', '?'])
            || line
                .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.')
                .contains(". ")
            || line.split_whitespace().count() > 12;
        if sentence_like {
            return None;
        }
        if let Some(caps) = self.numbered.captures(line) {
            let depth = caps
                .get(1)
                .map(|m| m.as_str().trim_end_matches('.').split('.').count())
                .unwrap_or(1);
            return Some(depth.clamp(1, 6) as u8);
        }
        let words = line.split_whitespace().count();
        let letters = line.chars().filter(|c| c.is_alphabetic()).count();
        if words <= self.allcaps_max_words
            && letters >= 2
            && !line.chars().any(|c| c.is_lowercase())
        {
            return Some(1);
        }
        None
    }
}

// Numbered headings: "2 Methodology", "2.1 Extraction of data", "3. RESULTS".
static NUMBERED_HEADING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,2}(?:\.\d{1,2})*)\.?\s+\p{Lu}").expect("static regex"));

static MD_HEADING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(#{1,6})[ \t]+(.+?)[ \t#]*$").expect("static regex"));

static FIGURE_MENTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(Fig\.|Figure)\s*(\d+)").expect("static regex"));

static CAPTION_DEF: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:\*\*)?((?:Fig\.|Figure)\s*\d+)(?:\*\*)?\s*[.:|-]\s*(.+)$").expect("static regex")
});

static MD_IMAGE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^!\[([^\]]*)\]\(([^)\s]+)\)\s*$").expect("static regex"));

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    pub id: Option<String>,
    pub plain_rules: PlainHeadingRules,
}

/// Parses `raw_text` with default options and id `doc`.
pub fn parse_document(raw_text: &str, format: TextFormat) -> Result<Document, IngestError> {
    parse_document_with(raw_text, format, &ParseOptions::default())
}

pub fn parse_document_with(
    raw_text: &str,
    format: TextFormat,
    options: &ParseOptions,
) -> Result<Document, IngestError> {
    if raw_text.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }

    struct Pending {
        heading: String,
        level: u8,
        body: Vec<String>,
    }

    let mut pending = vec![Pending {
        heading: PREAMBLE_HEADING.to_string(),
        level: 1,
        body: Vec::new(),
    }];
    let mut in_fence = false;
    for line in raw_text.lines() {
        let trimmed = line.trim_start();
        if format == TextFormat::Markdown && (trimmed.starts_with("```") || trimmed.starts_with("~~~")) {
            in_fence = !in_fence;
        }
        let heading = if in_fence {
            None
        } else {
            match format {
                TextFormat::Markdown => MD_HEADING.captures(line).map(|c| {
                    (c[2].trim().to_string(), c[1].len() as u8)
                }),
                TextFormat::Plain => options
                    .plain_rules
                    .heading_level(line)
                    .map(|level| (line.trim().to_string(), level)),
            }
        };
        match heading {
            Some((heading, level)) if !heading.is_empty() => pending.push(Pending {
                heading,
                level,
                body: Vec::new(),
            }),
            _ => pending.last_mut().expect("non-empty").body.push(line.to_string()),
        }
    }

    let mut sections: Vec<Section> = pending
        .into_iter()
        .map(|p| Section {
            heading: p.heading,
            level: p.level,
            paragraphs: segment_paragraphs(&p.body.join("\n")),
            figure_labels: Vec::new(),
        })
        .collect();
    if sections[0].paragraphs.is_empty() && sections.len() > 1 {
        sections.remove(0);
    }

    let title = sections
        .iter()
        .find(|s| s.level == 1 && s.heading != PREAMBLE_HEADING)
        .or_else(|| sections.iter().find(|s| s.heading != PREAMBLE_HEADING))
        .map(|s| s.heading.clone())
        .unwrap_or_default();

    let figures = collect_figure_definitions(&sections);
    let doc = Document {
        id: options.id.clone().unwrap_or_else(|| "doc".to_string()),
        title,
        sections,
        figures,
        diagnostics: Vec::new(),
    };
    Ok(scan_figure_mentions(doc))
}

fn collect_figure_definitions(sections: &[Section]) -> Vec<FigureRef> {
    let mut figures: Vec<FigureRef> = Vec::new();
    let mut seen = BTreeSet::new();
    for para in sections.iter().flat_map(|s| &s.paragraphs) {
        let first_line = para.lines().next().unwrap_or_default().trim();
        let (asset_path, caption_text) = match MD_IMAGE.captures(first_line) {
            Some(c) => {
                let rest: Vec<&str> = para.lines().skip(1).collect();
                let text = if rest.is_empty() {
                    c[1].to_string()
                } else {
                    rest.join(" ")
                };
                (Some(c[2].to_string()), text)
            }
            None => (None, para.replace('\n', " ")),
        };
        if let Some(c) = CAPTION_DEF.captures(caption_text.trim()) {
            let label = normalize_figure_label(&c[1]);
            if seen.insert(label.clone()) {
                figures.push(FigureRef {
                    label,
                    caption: c[2].trim().to_string(),
                    asset_path,
                });
            }
        }
    }
    figures
}

fn normalize_figure_label(raw: &str) -> String {
    match FIGURE_MENTION.captures(raw) {
        Some(c) => format!("{} {}", &c[1], &c[2]),
        None => raw.trim().to_string(),
    }
}

fn figure_number(label: &str) -> Option<String> {
    FIGURE_MENTION.captures(label).map(|c| c[2].to_string())
}

/// Records "Fig. N" / "Figure N" mentions per section and flags mentions that
/// have no caption definition in the document.
pub fn scan_figure_mentions(mut document: Document) -> Document {
    for section in &mut document.sections {
        let mut labels: Vec<String> = Vec::new();
        for para in &section.paragraphs {
            for c in FIGURE_MENTION.captures_iter(para) {
                let label = format!("{} {}", &c[1], &c[2]);
                if !labels.contains(&label) {
                    labels.push(label);
                }
            }
        }
        section.figure_labels = labels;
    }
    let mut diagnostics: BTreeMap<String, ()> = BTreeMap::new();
    for label in document.undefined_figure_mentions() {
        diagnostics.insert(format!("figure mention `{label}` has no caption definition"), ());
    }
    let existing: BTreeSet<String> = document.diagnostics.iter().cloned().collect();
    for (d, _) in diagnostics {
        if !existing.contains(&d) {
            document.diagnostics.push(d);
        }
    }
    document
}
