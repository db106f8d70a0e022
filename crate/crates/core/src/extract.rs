//! Property tables from model output.
//!
//! Model replies are markdown, but rarely clean markdown: rows lose their
//! trailing pipe, header rows go missing, and several key/value pairs get
//! fused into one line (`| a | 1 | | b | 2 |`). The parser repairs rather
//! than rejects and writes one repair note per repaired row, prefixed with
//! the row's 1-based line number in the input.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("no markdown tables found in model output")]
    NoTablesFound,
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyTable {
    pub title: String,
    pub records: Vec<PropertyRecord>,
    pub repair_notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub key: String,
    pub raw_value: String,
    pub numeric_value: Option<f64>,
    pub uncertainty: Option<f64>,
    pub unit: Option<String>,
    pub source_section: Option<String>,
}

impl PropertyRecord {
    pub fn new(key: impl Into<String>, raw_value: impl Into<String>) -> Self {
        let raw_value = raw_value.into();
        let parts = parse_value_unit(&raw_value);
        Self {
            key: key.into(),
            raw_value,
            numeric_value: parts.numeric_value,
            uncertainty: parts.uncertainty,
            unit: parts.unit,
            source_section: None,
        }
    }
}

/// Decomposition of one table cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValueParts {
    pub numeric_value: Option<f64>,
    pub uncertainty: Option<f64>,
    pub unit: Option<String>,
    pub residual_text: Option<String>,
    /// The numeric prefix as written, e.g. `23.4 ± 1.0`.
    pub number_text: Option<String>,
}

impl ValueParts {
    /// Rebuilds the cell text from its parts. Whitespace between parts is
    /// not preserved; every other character is.
    pub fn reconstruct(&self) -> String {
        let mut pieces: Vec<&str> = Vec::new();
        if let Some(n) = &self.number_text {
            pieces.push(n);
        }
        let unit = self.unit.as_deref();
        let residual = self.residual_text.as_deref();
        if unit == Some("%") {
            pieces.extend(residual);
            pieces.push("%");
        } else {
            pieces.extend(unit);
            pieces.extend(residual);
        }
        pieces.join(" ")
    }
}

static NUMBER_PREFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([+-]?(?:\d+(?:\.\d+)?|\.\d+)(?:[eE][+-]?\d+)?)(?:\s*(?:±|\+/-|\+-)\s*(\d+(?:\.\d+)?|\.\d+))?")
        .expect("static regex")
});

fn is_unit_token(token: &str) -> bool {
    token.chars().count() <= 12
        && token.chars().any(|c| c.is_alphabetic() || c == '°' || c == '%')
        && token
            .chars()
            .all(|c| c.is_alphabetic() || "%°/·^-.²³⁻¹0123456789".contains(c))
}

pub fn parse_value_unit(cell: &str) -> ValueParts {
    let cell = cell.trim();
    let bare = || ValueParts {
        residual_text: (!cell.is_empty()).then(|| cell.to_string()),
        ..ValueParts::default()
    };
    let Some(caps) = NUMBER_PREFIX.captures(cell) else {
        return bare();
    };
    let prefix = caps.get(0).expect("whole match");
    let rest = &cell[prefix.end()..];
    // "6Al-4V" is a composition, not six of a unit
    if !(rest.is_empty() || rest.starts_with(|c: char| c.is_whitespace() || c == '%' || c == '°')) {
        return bare();
    }
    let Ok(numeric) = caps[1].parse::<f64>() else {
        return bare();
    };
    let uncertainty = caps.get(2).and_then(|m| m.as_str().parse::<f64>().ok());

    let rest = rest.trim();
    let (unit, residual) = if let Some(before) = rest.strip_suffix('%') {
        let before = before.trim();
        (Some("%".to_string()), (!before.is_empty()).then(|| before.to_string()))
    } else if rest.is_empty() {
        (None, None)
    } else {
        let (first, tail) = match rest.split_once(char::is_whitespace) {
            Some((first, tail)) => (first, tail.trim()),
            None => (rest, ""),
        };
        if is_unit_token(first) {
            (Some(first.to_string()), (!tail.is_empty()).then(|| tail.to_string()))
        } else {
            (None, Some(rest.to_string()))
        }
    };

    ValueParts {
        numeric_value: Some(numeric),
        uncertainty,
        unit,
        residual_text: residual,
        number_text: Some(prefix.as_str().to_string()),
    }
}

static SEPARATOR_CELL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^:?-+:?$").expect("static regex"));
static HEADING_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:#{1,6}\s+(.+?)\s*#*|\*\*(.+?)\*\*:?)$").expect("static regex"));

struct RowCells {
    cells: Vec<String>,
    missing_trailing_pipe: bool,
}

fn split_row(line: &str) -> RowCells {
    let body = line.trim();
    let body = body.strip_prefix('|').unwrap_or(body);
    let (body, missing_trailing_pipe) = match body.strip_suffix('|') {
        Some(b) => (b, false),
        None => (body, true),
    };
    RowCells {
        cells: body.split('|').map(|c| c.trim().to_string()).collect(),
        missing_trailing_pipe,
    }
}

fn is_separator(line: &str) -> bool {
    let row = split_row(line);
    let cells: Vec<&String> = row.cells.iter().filter(|c| !c.is_empty()).collect();
    !cells.is_empty() && cells.iter().all(|c| SEPARATOR_CELL.is_match(c))
}

fn is_table_line(line: &str) -> bool {
    line.trim_start().starts_with('|')
}

struct TableBuilder {
    title: String,
    header: Option<Vec<String>>,
    records: Vec<PropertyRecord>,
    repair_notes: Vec<String>,
}

impl TableBuilder {
    fn width(&self) -> usize {
        self.header.as_ref().map_or(2, |h| h.len().max(2))
    }

    fn unit_column(&self) -> Option<usize> {
        self.header.as_ref().and_then(|h| {
            h.iter()
                .position(|c| matches!(c.to_lowercase().as_str(), "unit" | "units"))
                .filter(|&i| i > 0)
        })
    }

    fn push_row(&mut self, line_no: usize, line: &str) {
        let row = split_row(line);
        let width = self.width();
        let mut notes: Vec<String> = Vec::new();
        if row.missing_trailing_pipe {
            notes.push("missing trailing pipe".to_string());
        }

        let groups: Vec<Vec<String>> = if row.cells.len() > width && row.cells.iter().any(String::is_empty) {
            row.cells
                .split(|c| c.is_empty())
                .filter(|g| !g.is_empty())
                .map(<[String]>::to_vec)
                .collect()
        } else {
            vec![row.cells]
        };
        if groups.len() > 1 {
            notes.push(format!("split fused row into {} records", groups.len()));
        }

        let before = self.records.len();
        for group in groups {
            self.push_group(group, &mut notes);
        }
        if self.records.len() == before {
            notes.push("dropped: no key/value content".to_string());
        }
        if !notes.is_empty() {
            self.repair_notes.push(format!("row {line_no}: {}", notes.join("; ")));
        }
    }

    fn push_group(&mut self, mut group: Vec<String>, notes: &mut Vec<String>) {
        let width = self.width();
        if group.iter().all(String::is_empty) {
            return;
        }
        let key = group[0].clone();
        if key.is_empty() {
            notes.push("dropped cells with empty key".to_string());
            return;
        }

        if width == 2 {
            let value = match group.len() {
                1 => {
                    notes.push(format!("value missing for `{key}`"));
                    String::new()
                }
                2 => group.pop().expect("two cells"),
                _ => {
                    notes.push(format!("joined {} extra cells for `{key}`", group.len() - 2));
                    group[1..].join(" | ")
                }
            };
            self.records.push(PropertyRecord::new(key, value));
            return;
        }

        if group.len() != width {
            notes.push(format!("row has {} of {} cells", group.len(), width));
            group.resize(width, String::new());
        }
        let header = self.header.clone().unwrap_or_default();
        let unit_col = self.unit_column();
        let value_cols: Vec<usize> = (1..width).filter(|&i| Some(i) != unit_col).collect();
        let unit_cell = unit_col.map(|i| group[i].clone()).filter(|u| !u.is_empty());
        let mut produced = false;
        for &col in &value_cols {
            let value = &group[col];
            if value.is_empty() {
                continue;
            }
            let record_key = if value_cols.len() == 1 {
                key.clone()
            } else {
                format!("{key} / {}", header.get(col).map(String::as_str).unwrap_or(""))
            };
            let mut record = PropertyRecord::new(record_key, value.clone());
            if record.unit.is_none() && record.numeric_value.is_some() {
                record.unit.clone_from(&unit_cell);
            }
            self.records.push(record);
            produced = true;
        }
        if !produced {
            notes.push(format!("value missing for `{key}`"));
            self.records.push(PropertyRecord::new(key, String::new()));
        }
    }
}

fn heading_text(line: &str) -> Option<String> {
    HEADING_LINE
        .captures(line.trim())
        .and_then(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().trim().to_string())
}

/// Parses every pipe table in `text`. Headings (`###` or `**bold**` lines)
/// above a table become its title.
pub fn parse_markdown_tables(text: &str) -> Result<Vec<PropertyTable>, ExtractError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut tables = Vec::new();
    let mut pending_title: Option<String> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if !is_table_line(line) {
            if let Some(t) = heading_text(line) {
                pending_title = Some(t);
            }
            i += 1;
            continue;
        }
        let start = i;
        while i < lines.len() && is_table_line(lines[i]) {
            i += 1;
        }
        let block = &lines[start..i];

        let untitled = format!("Table {}", tables.len() + 1);
        let mut builder = TableBuilder {
            title: pending_title.take().unwrap_or(untitled),
            header: None,
            records: Vec::new(),
            repair_notes: Vec::new(),
        };
        let mut data_from = 0;
        if block.len() >= 2 && !is_separator(block[0]) && is_separator(block[1]) {
            let header: Vec<String> = split_row(block[0]).cells.into_iter().filter(|c| !c.is_empty()).collect();
            builder.header = Some(header);
            data_from = 2;
        }
        for (offset, row) in block.iter().enumerate().skip(data_from) {
            if is_separator(row) {
                continue;
            }
            builder.push_row(start + offset + 1, row);
        }
        if !builder.records.is_empty() {
            tables.push(PropertyTable {
                title: builder.title,
                records: builder.records,
                repair_notes: builder.repair_notes,
            });
        }
    }
    if tables.is_empty() {
        return Err(ExtractError::NoTablesFound);
    }
    Ok(tables)
}

#[derive(Serialize, Deserialize)]
struct TablesFile {
    tables: Vec<PropertyTable>,
}

pub fn records_to_json(tables: &[PropertyTable]) -> String {
    let file = TablesFile { tables: tables.to_vec() };
    let mut out = serde_json::to_string_pretty(&file).expect("tables serialize");
    out.push('\n');
    out
}

pub fn records_from_json(text: &str) -> Result<Vec<PropertyTable>, ExtractError> {
    let file: TablesFile = serde_json::from_str(text).map_err(|e| ExtractError::SchemaViolation {
        path: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    for (t, table) in file.tables.iter().enumerate() {
        for (r, record) in table.records.iter().enumerate() {
            let violation = |field: &str, message: &str| ExtractError::SchemaViolation {
                path: format!("tables[{t}].records[{r}].{field}"),
                message: message.to_string(),
            };
            if record.key.trim().is_empty() {
                return Err(violation("key", "key must be non-empty"));
            }
            if let Some(u) = record.uncertainty {
                if record.numeric_value.is_none() {
                    return Err(violation("uncertainty", "uncertainty requires numeric_value"));
                }
                if u < 0.0 {
                    return Err(violation("uncertainty", "uncertainty must be non-negative"));
                }
            }
        }
    }
    Ok(file.tables)
}

/// CSV with the JSON record columns plus the owning table title.
pub fn records_to_csv(tables: &[PropertyTable]) -> Result<String, ExtractError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "table",
        "key",
        "raw_value",
        "numeric_value",
        "uncertainty",
        "unit",
        "source_section",
    ])?;
    let opt_num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for table in tables {
        for r in &table.records {
            writer.write_record([
                table.title.as_str(),
                r.key.as_str(),
                r.raw_value.as_str(),
                &opt_num(r.numeric_value),
                &opt_num(r.uncertainty),
                r.unit.as_deref().unwrap_or(""),
                r.source_section.as_deref().unwrap_or(""),
            ])?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| ExtractError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_with_uncertainty() {
        let p = parse_value_unit("23.4 ± 1.0 μm");
        assert_eq!(p.numeric_value, Some(23.4));
        assert_eq!(p.uncertainty, Some(1.0));
        assert_eq!(p.unit.as_deref(), Some("μm"));
        assert_eq!(p.residual_text, None);
    }

    #[test]
    fn value_with_unit() {
        let p = parse_value_unit("920 MPa");
        assert_eq!((p.numeric_value, p.uncertainty, p.unit.as_deref()), (Some(920.0), None, Some("MPa")));
    }

    #[test]
    fn bare_text_cells() {
        let p = parse_value_unit("Kroll's Reagent");
        assert_eq!(p.numeric_value, None);
        assert_eq!(p.residual_text.as_deref(), Some("Kroll's Reagent"));
        assert_eq!(parse_value_unit("6Al-4V").numeric_value, None);
        assert_eq!(parse_value_unit(""), ValueParts::default());
    }

    #[test]
    fn percentages() {
        let p = parse_value_unit("77 vol.%");
        assert_eq!(p.numeric_value, Some(77.0));
        assert_eq!(p.unit.as_deref(), Some("%"));
        assert_eq!(p.residual_text.as_deref(), Some("vol."));
        let q = parse_value_unit("15%");
        assert_eq!((q.numeric_value, q.unit.as_deref(), q.residual_text), (Some(15.0), Some("%"), None));
    }

    #[test]
    fn number_then_prose() {
        let p = parse_value_unit("0.06 mm finish");
        assert_eq!(p.unit.as_deref(), Some("mm"));
        assert_eq!(p.residual_text.as_deref(), Some("finish"));
        let q = parse_value_unit("15");
        assert_eq!((q.numeric_value, q.unit), (Some(15.0), None));
        let r = parse_value_unit("16 - 20 MPa");
        assert_eq!(r.unit, None);
        assert_eq!(r.residual_text.as_deref(), Some("- 20 MPa"));
    }

    #[test]
    fn fused_row_splits_into_two_records() {
        let text = "| Property | Value |\n|---|---|\n| Supplier | Wyman Gordon Forgings, Houston, TX | | Surface Finish | 0.06 mm |";
        let tables = parse_markdown_tables(text).unwrap();
        assert_eq!(tables.len(), 1);
        let t = &tables[0];
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.records[0].key, "Supplier");
        assert_eq!(t.records[0].raw_value, "Wyman Gordon Forgings, Houston, TX");
        assert_eq!(t.records[1].key, "Surface Finish");
        assert_eq!(t.records[1].numeric_value, Some(0.06));
        assert_eq!(t.records[1].unit.as_deref(), Some("mm"));
        assert_eq!(t.repair_notes, vec!["row 3: split fused row into 2 records".to_string()]);
    }

    #[test]
    fn headerless_table_with_missing_pipes() {
        let text = "### Table: Material Properties\n| Grain Size | 23.4 ± 1.0 μm | | Volume Fraction | 77\n| Tensile Strength | 920 MPa |";
        let tables = parse_markdown_tables(text).unwrap();
        let t = &tables[0];
        assert_eq!(t.title, "Table: Material Properties");
        assert_eq!(t.records.len(), 3);
        assert_eq!(t.repair_notes.len(), 1);
        assert!(t.repair_notes[0].starts_with("row 2: missing trailing pipe; split fused row into 2"));
        assert_eq!(t.records[2].numeric_value, Some(920.0));
    }

    #[test]
    fn no_tables() {
        assert!(matches!(parse_markdown_tables("no tables here"), Err(ExtractError::NoTablesFound)));
        assert!(matches!(
            parse_markdown_tables("| A | B |\n|---|---|\n"),
            Err(ExtractError::NoTablesFound)
        ));
    }

    #[test]
    fn wide_table_with_unit_column() {
        let text = "**Mechanical data**\n| Alloy | Yield | Unit |\n|:--|--:|---|\n| Ti64 | 880 | MPa |\n| Ti5553 | 1100 | MPa |";
        let t = &parse_markdown_tables(text).unwrap()[0];
        assert_eq!(t.title, "Mechanical data");
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.records[0].key, "Ti64");
        assert_eq!(t.records[0].unit.as_deref(), Some("MPa"));
        assert!(t.repair_notes.is_empty());
    }

    #[test]
    fn wide_table_multiple_value_columns() {
        let text = "| Condition | UTS | Elongation |\n|---|---|---|\n| Forged | 920 MPa | 15% |\n| Annealed | 880 MPa |";
        let t = &parse_markdown_tables(text).unwrap()[0];
        let keys: Vec<&str> = t.records.iter().map(|r| r.key.as_str()).collect();
        assert_eq!(keys, ["Forged / UTS", "Forged / Elongation", "Annealed / UTS"]);
        assert_eq!(t.repair_notes, vec!["row 4: row has 2 of 3 cells".to_string()]);
    }

    #[test]
    fn empty_key_row_is_dropped_with_note() {
        let text = "| A | B |\n|---|---|\n| x | 1 |\n| | 2 |";
        let t = &parse_markdown_tables(text).unwrap()[0];
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.repair_notes.len(), 1);
        assert!(t.repair_notes[0].contains("dropped"));
    }

    #[test]
    fn json_round_trip_and_schema_errors() {
        let text = "| Tensile Strength | 920 MPa |\n| Grain | 23.4 ± 1.0 μm";
        let tables = parse_markdown_tables(text).unwrap();
        let json = records_to_json(&tables);
        assert_eq!(records_from_json(&json).unwrap(), tables);

        let missing_key = r#"{"tables":[{"title":"t","records":[{"raw_value":"1","numeric_value":1.0,"uncertainty":null,"unit":null,"source_section":null}],"repair_notes":[]}]}"#;
        assert!(matches!(records_from_json(missing_key), Err(ExtractError::SchemaViolation { .. })));
        let orphan_uncertainty = r#"{"tables":[{"title":"t","records":[{"key":"k","raw_value":"x","numeric_value":null,"uncertainty":1.0,"unit":null,"source_section":null}],"repair_notes":[]}]}"#;
        match records_from_json(orphan_uncertainty) {
            Err(ExtractError::SchemaViolation { path, .. }) => assert_eq!(path, "tables[0].records[0].uncertainty"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_has_one_line_per_record() {
        let tables = parse_markdown_tables("| a | 1 |\n| b | 2 mm |").unwrap();
        let csv = records_to_csv(&tables).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("Table 1,b,2 mm,2,,mm,"));
    }
}
