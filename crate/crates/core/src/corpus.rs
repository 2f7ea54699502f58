//! On-disk dataset and word-vector formats.
//!
//! Datasets are JSON lines, one record per annotated mention:
//!
//! ```json
//! {"tokens": ["the", "president", "said"], "mention": [1, 2],
//!  "coarse": ["person"], "fine": ["politician"], "ultra": ["president"]}
//! ```
//!
//! Word vectors use the common pretrained text format, one
//! `token v1 ... vd` line per type.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Vocabulary, WordEmbeddingTable, PAD_TOKEN, UNK_TOKEN};
use crate::hierarchy::{AnnotatedInstance, Granularity, HierarchyError, TypeInventory};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unresolvable label names: {}", .0.join(", "))]
    UnknownLabels(Vec<String>),
    #[error("line {line}: label '{name}' listed as {listed} but inventory says {actual}")]
    GranularityMismatch { line: usize, name: String, listed: Granularity, actual: Granularity },
    #[error("line {line}: vector has {got} dims, expected {expected}")]
    InconsistentDim { line: usize, got: usize, expected: usize },
    #[error("empty word-vector file")]
    EmptyWordVectors,
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tokens: Vec<String>,
    pub mention: (usize, usize),
    pub coarse: Vec<String>,
    pub fine: Vec<String>,
    pub ultra: Vec<String>,
}

impl DatasetRecord {
    pub fn label_names(&self) -> impl Iterator<Item = (&str, Granularity)> {
        self.coarse
            .iter()
            .map(|n| (n.as_str(), Granularity::Coarse))
            .chain(self.fine.iter().map(|n| (n.as_str(), Granularity::Fine)))
            .chain(self.ultra.iter().map(|n| (n.as_str(), Granularity::Ultra)))
    }
}

/// Resolves one record against the inventory. Label names must exist and
/// sit in the list matching their inventory granularity.
pub fn record_to_instance(
    record: &DatasetRecord,
    inventory: &TypeInventory,
    line: usize,
) -> Result<AnnotatedInstance, CorpusError> {
    let mut gold = Vec::new();
    let mut unknown = BTreeSet::new();
    for (name, listed) in record.label_names() {
        match inventory.id_of(name) {
            Some(id) => {
                let actual = inventory.granularity_of(id)?;
                if actual != listed {
                    return Err(CorpusError::GranularityMismatch {
                        line,
                        name: name.to_string(),
                        listed,
                        actual,
                    });
                }
                gold.push(id);
            }
            None => {
                unknown.insert(name.to_string());
            }
        }
    }
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownLabels(unknown.into_iter().collect()));
    }
    AnnotatedInstance::new(
        record.tokens.clone(),
        record.mention.0,
        record.mention.1,
        gold,
        inventory.len(),
    )
    .map_err(|e| CorpusError::Parse { line, message: e.to_string() })
}

/// Reads a JSONL dataset, resolving labels against the inventory. Every
/// unresolvable label name across the whole file is reported at once.
pub fn read_dataset<R: BufRead>(
    r: R,
    inventory: &TypeInventory,
) -> Result<Vec<AnnotatedInstance>, CorpusError> {
    let mut instances = Vec::new();
    let mut unknown = BTreeSet::new();
    for (lineno, line) in r.lines().enumerate() {
        let line =
            line.map_err(|e| CorpusError::Parse { line: lineno + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: lineno + 1, message: e.to_string() })?;
        match record_to_instance(&record, inventory, lineno + 1) {
            Ok(instance) => instances.push(instance),
            Err(CorpusError::UnknownLabels(names)) => unknown.extend(names),
            Err(other) => return Err(other),
        }
    }
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownLabels(unknown.into_iter().collect()));
    }
    Ok(instances)
}

pub fn write_dataset<W: Write>(records: &[DatasetRecord], mut w: W) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Loads a text word-vector file into a vocabulary and table. UNK and PAD
/// rows (zeros) are appended unless the file defines those tokens itself.
pub fn read_word_vectors<R: BufRead>(
    r: R,
) -> Result<(Vocabulary, WordEmbeddingTable), CorpusError> {
    let mut tokens: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in r.lines().enumerate() {
        let line =
            line.map_err(|e| CorpusError::Parse { line: lineno + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or(CorpusError::Parse {
            line: lineno + 1,
            message: "missing token".into(),
        })?;
        let coords: Result<Vec<f64>, _> = parts.map(|s| s.parse::<f64>()).collect();
        let coords = coords
            .map_err(|e| CorpusError::Parse { line: lineno + 1, message: e.to_string() })?;
        if coords.is_empty() {
            return Err(CorpusError::Parse {
                line: lineno + 1,
                message: format!("token '{token}' has no coordinates"),
            });
        }
        match dim {
            None => dim = Some(coords.len()),
            Some(d) if d != coords.len() => {
                return Err(CorpusError::InconsistentDim {
                    line: lineno + 1,
                    got: coords.len(),
                    expected: d,
                })
            }
            _ => {}
        }
        tokens.push(token.to_string());
        rows.push(coords);
    }
    let dim = dim.ok_or(CorpusError::EmptyWordVectors)?;
    // Zero rows for the specials the file does not define, in the order
    // the vocabulary appends them.
    for special in [UNK_TOKEN, PAD_TOKEN] {
        if !tokens.iter().any(|t| t == special) {
            rows.push(vec![0.0; dim]);
        }
    }
    let vocab = Vocabulary::new(&tokens);
    Ok((vocab, WordEmbeddingTable::new(rows, true)))
}

/// Writes a word-vector file with round-trip-exact floats.
pub fn write_word_vectors<W: Write>(
    entries: &[(String, Vec<f64>)],
    mut w: W,
) -> std::io::Result<()> {
    for (token, coords) in entries {
        write!(w, "{token}")?;
        for x in coords {
            write!(w, " {x:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
