//! JSONL corpora, QA sets, vocabulary files, and hard-negative lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use utp_core::qa::QaExample;
use utp_core::{Corpus, Table, TableTextPair, Vocab};

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawTable {
    header: Option<Vec<String>>,
    rows: Option<Vec<Vec<String>>>,
}

#[derive(Deserialize)]
struct RawLine {
    id: Option<String>,
    text: Option<String>,
    table: Option<RawTable>,
    #[serde(default)]
    gold_cells: Option<Vec<(usize, usize)>>,
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with their 1-based numbers.
fn lines(body: &str) -> impl Iterator<Item = (usize, &str)> {
    body.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_pair(line: usize, raw: &str) -> Result<(TableTextPair, Option<Vec<(usize, usize)>>)> {
    let raw: RawLine = serde_json::from_str(raw).map_err(|e| Error::Json {
        line,
        message: e.to_string(),
    })?;
    let missing = |field| Error::MissingField { line, field };
    let id = raw.id.ok_or(missing("id"))?;
    let text = raw.text.ok_or(missing("text"))?;
    let table = raw.table.ok_or(missing("table"))?;
    let header = table.header.ok_or(missing("table.header"))?;
    let rows = table.rows.ok_or(missing("table.rows"))?;
    let table = Table::new(header, rows).map_err(|e| match e {
        utp_core::Error::RaggedRow { row, expected, got } => Error::RaggedRow {
            line,
            row,
            expected,
            got,
        },
        source => Error::InvalidLine { line, source },
    })?;
    let pair = TableTextPair::new(id, text, table).map_err(|source| Error::InvalidLine { line, source })?;
    Ok((pair, raw.gold_cells))
}

fn check_unique(seen: &mut BTreeMap<String, usize>, id: &str, line: usize) -> Result<()> {
    if let Some(&first) = seen.get(id) {
        return Err(Error::DuplicateId {
            line,
            id: id.to_string(),
            first,
        });
    }
    seen.insert(id.to_string(), line);
    Ok(())
}

/// Parses a corpus body: one pair object per line, blank lines skipped.
pub fn parse_corpus(body: &str) -> Result<Corpus> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (line, raw) in lines(body) {
        let (pair, _) = parse_pair(line, raw)?;
        check_unique(&mut seen, &pair.id, line)?;
        pairs.push(pair);
    }
    Ok(Corpus::new(pairs)?)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&read_text(path)?)
}

pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for p in corpus.pairs() {
        out.push_str(&serde_json::to_string(p).expect("pairs serialize"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_text(path, &corpus_to_string(corpus))
}

#[derive(Serialize)]
struct QaLineOut<'a> {
    id: &'a str,
    text: &'a str,
    table: &'a Table,
    gold_cells: &'a BTreeSet<(usize, usize)>,
}

/// Parses a QA set: the pair schema plus `"gold_cells": [[row, col], ...]`.
pub fn parse_qa(body: &str) -> Result<Vec<QaExample>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (line, raw) in lines(body) {
        let (pair, gold) = parse_pair(line, raw)?;
        check_unique(&mut seen, &pair.id, line)?;
        let gold = gold.ok_or(Error::MissingField {
            line,
            field: "gold_cells",
        })?;
        let ex = QaExample::new(pair, gold.into_iter().collect())
            .map_err(|source| Error::InvalidLine { line, source })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_qa(path: &Path) -> Result<Vec<QaExample>> {
    parse_qa(&read_text(path)?)
}

pub fn qa_to_string(examples: &[QaExample]) -> String {
    let mut out = String::new();
    for e in examples {
        let line = QaLineOut {
            id: &e.pair.id,
            text: &e.pair.text,
            table: &e.pair.table,
            gold_cells: &e.gold_cells,
        };
        out.push_str(&serde_json::to_string(&line).expect("examples serialize"));
        out.push('\n');
    }
    out
}

pub fn write_qa(path: &Path, examples: &[QaExample]) -> Result<()> {
    write_text(path, &qa_to_string(examples))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let body = read_text(path)?;
    Ok(Vocab::from_tokens(body.lines().map(str::to_string).collect())?)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_text(path, &vocab.to_file_string())
}

#[derive(Serialize, Deserialize)]
struct NegativeLine {
    query_id: String,
    tables: Vec<String>,
    short: bool,
}

/// One line per query: `{"query_id": s, "tables": [s, ...], "short": b}`.
pub fn negatives_to_string(mined: &utp_core::retrieval::MinedNegatives) -> String {
    let short: BTreeSet<&str> = mined.short.iter().map(String::as_str).collect();
    let mut out = String::new();
    for (q, tables) in &mined.negatives {
        let line = NegativeLine {
            query_id: q.clone(),
            tables: tables.clone(),
            short: short.contains(q.as_str()),
        };
        out.push_str(&serde_json::to_string(&line).expect("negatives serialize"));
        out.push('\n');
    }
    out
}

pub fn read_negatives(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let body = read_text(path)?;
    let mut out = BTreeMap::new();
    for (line, raw) in lines(&body) {
        let n: NegativeLine = serde_json::from_str(raw).map_err(|e| Error::Json {
            line,
            message: e.to_string(),
        })?;
        out.insert(n.query_id, n.tables);
    }
    Ok(out)
}
