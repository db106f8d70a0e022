//! ROUGE-1/2/L/Lsum scoring and the exact/relaxed match reports built on it.
//!
//! "Exact" match is the componentwise mean of ROUGE-1 and ROUGE-2; "relaxed"
//! match is the mean of ROUGE-L and ROUGE-Lsum. Both sides of a comparison are
//! run through the same [`NormalizationPolicy`] before scoring.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{normalize_text, NormalizationPolicy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid corpus manifest: {0}")]
    Manifest(String),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };

    /// Score from a match count and the two item totals; `0/0` is `0`.
    pub fn from_counts(matched: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self {
            precision: ratio(matched, candidate_total),
            recall: ratio(matched, reference_total),
            // 2PR/(P+R) with P = m/c and R = m/r reduces to 2m/(c+r).
            f1: ratio(2 * matched, candidate_total + reference_total),
        }
    }

    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    /// Componentwise arithmetic mean. The result's `f1` is the mean of the
    /// inputs' F1 values, so it is generally not the harmonic mean of the
    /// averaged precision and recall.
    pub fn mean(scores: &[RougeScore]) -> RougeScore {
        if scores.is_empty() {
            return RougeScore::ZERO;
        }
        let n = scores.len() as f64;
        let (p, r, f) = scores.iter().fold((0.0, 0.0, 0.0), |(p, r, f), s| {
            (p + s.precision, r + s.recall, f + s.f1)
        });
        RougeScore { precision: p / n, recall: r / n, f1: f / n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    #[serde(rename = "rougeLsum")]
    pub rouge_lsum: RougeScore,
    pub exact: RougeScore,
    pub relaxed: RougeScore,
}

impl MatchReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10} {:>9} {:>9} {:>9}\n", "metric", "recall", "precision", "f1");
        for (name, s) in [
            ("rouge1", self.rouge1),
            ("rouge2", self.rouge2),
            ("rougeL", self.rouge_l),
            ("rougeLsum", self.rouge_lsum),
            ("exact", self.exact),
            ("relaxed", self.relaxed),
        ] {
            let _ = writeln!(out, "{name:<10} {:>9.5} {:>9.5} {:>9.5}", s.recall, s.precision, s.f1);
        }
        out
    }
}

pub fn tokenize(text: &str, policy: &NormalizationPolicy) -> Vec<String> {
    normalize_text(text, policy)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram counts.
///
/// Panics if `n == 0`.
pub fn ngram_rouge<S: AsRef<str>>(reference: &[S], candidate: &[S], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let ref_counts = ngram_counts(reference, n);
    let cand_counts = ngram_counts(candidate, n);
    let overlap: usize = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| len.saturating_sub(n - 1);
    RougeScore::from_counts(overlap, total(candidate.len()), total(reference.len()))
}

/// Longest common subsequence length, in O(|a|·|b|) time and O(min) space.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; short.len() + 1];
    let mut curr = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                curr[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// Positions in `reference` of one longest common subsequence with
/// `candidate`. Among all LCS choices the lexicographically smallest position
/// list is returned, so the result is independent of traversal details.
pub fn lcs_reference_positions<T: PartialEq>(reference: &[T], candidate: &[T]) -> Vec<usize> {
    let (n, m) = (reference.len(), candidate.len());
    // suffix[i][j] = LCS length of reference[i..] and candidate[j..]
    let mut suffix = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if reference[i] == candidate[j] {
                suffix[i + 1][j + 1] + 1
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut positions = Vec::with_capacity(suffix[0][0]);
    let (mut i, mut j) = (0, 0);
    while suffix[i][j] > 0 {
        let need = suffix[i][j];
        // smallest reference index that can start an optimal continuation,
        // paired with the earliest usable candidate index
        let (ri, cj) = (i..n)
            .flat_map(|ri| (j..m).map(move |cj| (ri, cj)))
            .find(|&(ri, cj)| reference[ri] == candidate[cj] && suffix[ri + 1][cj + 1] + 1 == need)
            .expect("suffix table guarantees a continuation");
        positions.push(ri);
        i = ri + 1;
        j = cj + 1;
    }
    positions
}

pub fn rouge_l(reference: &str, candidate: &str, policy: &NormalizationPolicy) -> RougeScore {
    let ref_tokens = tokenize(&reference.replace('\n', " "), policy);
    let cand_tokens = tokenize(&candidate.replace('\n', " "), policy);
    let lcs = lcs_length(&ref_tokens, &cand_tokens);
    RougeScore::from_counts(lcs, cand_tokens.len(), ref_tokens.len())
}

/// Splits on newlines and on `.`, `!`, `?` followed by whitespace or end of
/// text. Runs before punctuation stripping, since stripping would erase the
/// boundaries.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((idx, c)) = chars.next() {
        let end = match c {
            '\n' => Some((idx, idx + 1)),
            '.' | '!' | '?' => match chars.peek() {
                None => Some((idx + 1, idx + 1)),
                Some((_, next)) if next.is_whitespace() => Some((idx + 1, idx + 1)),
                _ => None,
            },
            _ => None,
        };
        if let Some((stop, resume)) = end {
            let piece = text[start..stop].trim();
            if !piece.is_empty() {
                out.push(piece);
            }
            start = resume;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn sentence_tokens(text: &str, policy: &NormalizationPolicy) -> Vec<Vec<String>> {
    split_sentences(text)
        .into_iter()
        .map(|s| tokenize(s, policy))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Summary-level LCS hit count: per reference sentence, the union of LCS
/// positions against every candidate sentence, with token hits clipped by
/// the remaining counts on both sides so nothing is counted twice.
pub fn union_lcs_hits(reference: &[Vec<String>], candidate: &[Vec<String>]) -> usize {
    let mut ref_left: HashMap<&str, usize> = HashMap::new();
    for tok in reference.iter().flatten() {
        *ref_left.entry(tok.as_str()).or_insert(0) += 1;
    }
    let mut cand_left: HashMap<&str, usize> = HashMap::new();
    for tok in candidate.iter().flatten() {
        *cand_left.entry(tok.as_str()).or_insert(0) += 1;
    }

    let mut hits = 0;
    for ref_sentence in reference {
        let union: BTreeSet<usize> = candidate
            .iter()
            .flat_map(|c| lcs_reference_positions(ref_sentence, c))
            .collect();
        for pos in union {
            let tok = ref_sentence[pos].as_str();
            let (Some(r), Some(c)) = (ref_left.get_mut(tok), cand_left.get_mut(tok)) else {
                continue;
            };
            if *r > 0 && *c > 0 {
                *r -= 1;
                *c -= 1;
                hits += 1;
            }
        }
    }
    hits
}

pub fn rouge_lsum(reference: &str, candidate: &str, policy: &NormalizationPolicy) -> RougeScore {
    let ref_sents = sentence_tokens(reference, policy);
    let cand_sents = sentence_tokens(candidate, policy);
    let hits = union_lcs_hits(&ref_sents, &cand_sents);
    let ref_total: usize = ref_sents.iter().map(Vec::len).sum();
    let cand_total: usize = cand_sents.iter().map(Vec::len).sum();
    RougeScore::from_counts(hits, cand_total, ref_total)
}

pub fn match_report(reference: &str, candidate: &str, policy: &NormalizationPolicy) -> MatchReport {
    let ref_tokens = tokenize(reference, policy);
    let cand_tokens = tokenize(candidate, policy);
    let rouge1 = ngram_rouge(&ref_tokens, &cand_tokens, 1);
    let rouge2 = ngram_rouge(&ref_tokens, &cand_tokens, 2);
    let rouge_l = rouge_l(reference, candidate, policy);
    let rouge_lsum = rouge_lsum(reference, candidate, policy);
    MatchReport {
        rouge1,
        rouge2,
        rouge_l,
        rouge_lsum,
        exact: RougeScore::mean(&[rouge1, rouge2]),
        relaxed: RougeScore::mean(&[rouge_l, rouge_lsum]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub name: String,
    pub reference_path: PathBuf,
    pub candidate_path: PathBuf,
}

/// Corpus manifest file: `{"pairs": [{name, reference_path, candidate_path}], "policy"?}`.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub pairs: Vec<EvalPair>,
    #[serde(default)]
    pub policy: Option<NormalizationPolicy>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| EvalError::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for pair in &mut manifest.pairs {
            pair.reference_path = base.join(&pair.reference_path);
            pair.candidate_path = base.join(&pair.candidate_path);
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub pair_name: String,
    pub exact: RougeScore,
    pub relaxed: RougeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub rows: Vec<CorpusRow>,
    pub average_row: CorpusRow,
}

impl CorpusReport {
    pub fn from_rows(rows: Vec<CorpusRow>) -> Self {
        let exact: Vec<RougeScore> = rows.iter().map(|r| r.exact).collect();
        let relaxed: Vec<RougeScore> = rows.iter().map(|r| r.relaxed).collect();
        let average_row = CorpusRow {
            pair_name: "Average".to_string(),
            exact: RougeScore::mean(&exact),
            relaxed: RougeScore::mean(&relaxed),
        };
        Self { rows, average_row }
    }

    fn all_rows(&self) -> impl Iterator<Item = &CorpusRow> {
        self.rows.iter().chain(std::iter::once(&self.average_row))
    }

    pub fn to_text(&self) -> String {
        let width = self
            .all_rows()
            .map(|r| r.pair_name.chars().count())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} | {:^29} | {:^29}", "", "Exact Match", "Relaxed Match");
        let _ = writeln!(
            out,
            "{:<width$} | {:>9} {:>9} {:>9} | {:>9} {:>9} {:>9}",
            "Pair", "Recall", "Precision", "F1", "Recall", "Precision", "F1"
        );
        let rule = "-".repeat(width + 66);
        let _ = writeln!(out, "{rule}");
        for (i, row) in self.all_rows().enumerate() {
            if i == self.rows.len() {
                let _ = writeln!(out, "{rule}");
            }
            let _ = writeln!(
                out,
                "{:<width$} | {:>9.5} {:>9.5} {:>9.5} | {:>9.5} {:>9.5} {:>9.5}",
                row.pair_name,
                row.exact.recall,
                row.exact.precision,
                row.exact.f1,
                row.relaxed.recall,
                row.relaxed.precision,
                row.relaxed.f1,
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record([
            "pair",
            "exact_recall",
            "exact_precision",
            "exact_f1",
            "relaxed_recall",
            "relaxed_precision",
            "relaxed_f1",
        ])?;
        for row in self.all_rows() {
            let cells = [
                row.exact.recall,
                row.exact.precision,
                row.exact.f1,
                row.relaxed.recall,
                row.relaxed.precision,
                row.relaxed.f1,
            ];
            let mut record = vec![row.pair_name.clone()];
            record.extend(cells.iter().map(f64::to_string));
            writer.write_record(&record)?;
        }
        let bytes = writer.into_inner().map_err(|e| EvalError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn read_file(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })
}

/// Scores every pair (in parallel) and returns rows in input order.
pub fn evaluate_corpus(pairs: &[EvalPair], policy: &NormalizationPolicy) -> Result<CorpusReport, EvalError> {
    let results: Vec<Result<CorpusRow, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|pair| {
                scope.spawn(move || {
                    let reference = read_file(&pair.reference_path)?;
                    let candidate = read_file(&pair.candidate_path)?;
                    let report = match_report(&reference, &candidate, policy);
                    Ok(CorpusRow {
                        pair_name: pair.name.clone(),
                        exact: report.exact,
                        relaxed: report.relaxed,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(CorpusReport::from_rows(rows))
}
