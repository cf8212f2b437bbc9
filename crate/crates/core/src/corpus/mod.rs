//! Corpus records, preprocessing and statistics.

mod intent;
mod text;
mod vocab;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use intent::IntentCategory;
pub use text::{split_statements, tokenize};
pub use vocab::{Vocabulary, BOS, CLS, EOS, PAD, RESERVED, SEP, UNK};

use crate::error::{Error, Result};

/// One `<code, comment, intent>` triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCommentRecord {
    pub id: u64,
    pub code: String,
    pub comment: String,
    pub intent: IntentCategory,
}

/// A record whose intent is unknown, as consumed by the labeler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledRecord {
    pub id: u64,
    pub code: String,
    pub comment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<IntentCategory>,
}

#[derive(Deserialize)]
struct RawRecord {
    code: String,
    comment: String,
    #[serde(default)]
    intent: Option<String>,
    #[serde(default)]
    id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Code,
    Comment,
}

fn parse_lines<R: BufRead>(reader: R) -> Result<Vec<(usize, RawRecord)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if raw.code.trim().is_empty() || raw.comment.trim().is_empty() {
            return Err(Error::Parse { line: lineno, message: "code and comment must be non-empty".into() });
        }
        let id = *raw.id.get_or_insert(out.len() as u64);
        if !seen.insert(id) {
            return Err(Error::Parse { line: lineno, message: format!("duplicate id {id}") });
        }
        out.push((lineno, raw));
    }
    Ok(out)
}

/// Reads a labeled JSON Lines corpus. Ids default to the record position.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<CodeCommentRecord>> {
    parse_lines(reader)?
        .into_iter()
        .map(|(line, raw)| {
            let label = raw
                .intent
                .ok_or_else(|| Error::Parse { line, message: "missing intent".into() })?;
            let intent = label
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("unknown intent {label:?}") })?;
            Ok(CodeCommentRecord { id: raw.id.unwrap_or_default(), code: raw.code, comment: raw.comment, intent })
        })
        .collect()
}

/// Reads a corpus whose intents may be absent.
pub fn read_unlabeled<R: BufRead>(reader: R) -> Result<Vec<UnlabeledRecord>> {
    parse_lines(reader)?
        .into_iter()
        .map(|(line, raw)| {
            let intent = match raw.intent {
                Some(label) => Some(
                    label
                        .parse()
                        .map_err(|_| Error::Parse { line, message: format!("unknown intent {label:?}") })?,
                ),
                None => None,
            };
            Ok(UnlabeledRecord { id: raw.id.unwrap_or_default(), code: raw.code, comment: raw.comment, intent })
        })
        .collect()
}

pub fn write_corpus<W: Write, T: Serialize>(mut writer: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Drops records labeled `Others`, keeping the order of the rest.
pub fn filter_others(corpus: Vec<CodeCommentRecord>) -> Vec<CodeCommentRecord> {
    corpus.into_iter().filter(|r| !r.intent.is_noise()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntentShare {
    pub count: usize,
    pub proportion: f64,
}

/// Count and proportion for each of the six intents, in taxonomy order.
pub fn intent_distribution(corpus: &[CodeCommentRecord]) -> Result<Vec<(IntentCategory, IntentShare)>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus is empty".into()));
    }
    let mut counts = [0usize; 6];
    for r in corpus {
        counts[r.intent.index()] += 1;
    }
    let total = corpus.len() as f64;
    Ok(IntentCategory::ALL
        .iter()
        .map(|&c| {
            let count = counts[c.index()];
            (c, IntentShare { count, proportion: count as f64 / total })
        })
        .collect())
}

/// Token lists of one side of the corpus. Code is tokenized per statement.
pub fn side_tokens(record: &CodeCommentRecord, side: Side) -> Vec<String> {
    match side {
        Side::Comment => tokenize(&record.comment),
        Side::Code => split_statements(&record.code)
            .map(|stmts| stmts.iter().flat_map(|s| tokenize(s)).collect())
            .unwrap_or_default(),
    }
}

pub fn build_vocab(corpus: &[CodeCommentRecord], side: Side, max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cannot build a vocabulary from an empty corpus".into()));
    }
    let lists: Vec<Vec<String>> = corpus.iter().map(|r| side_tokens(r, side)).collect();
    Vocabulary::from_token_lists(&lists, max_size)
}

/// Code as a single id sequence with a `[SEP]` closing every statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessedCode {
    pub token_ids: Vec<usize>,
    /// Half-open `(start, end)` ranges, one per statement.
    pub segments: Vec<(usize, usize)>,
}

impl PreprocessedCode {
    pub fn statement_count(&self) -> usize {
        self.segments.len()
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn preprocess_code(
    code: &str,
    vocab: &Vocabulary,
    max_statements: usize,
    max_statement_len: usize,
) -> Result<PreprocessedCode> {
    if max_statements == 0 || max_statement_len < 2 {
        return Err(Error::Config("need max_statements >= 1 and max_statement_len >= 2".into()));
    }
    let mut token_ids = Vec::new();
    let mut segments = Vec::new();
    for stmt in split_statements(code)?.iter().take(max_statements) {
        let toks = tokenize(stmt);
        if toks.is_empty() {
            continue;
        }
        let start = token_ids.len();
        token_ids.extend(toks.iter().take(max_statement_len - 1).map(|t| vocab.id(t)));
        token_ids.push(SEP);
        segments.push((start, token_ids.len()));
    }
    if segments.is_empty() {
        return Err(Error::EmptyInput("code has no statements".into()));
    }
    Ok(PreprocessedCode { token_ids, segments })
}
