//! JSON-Lines caption store, one [`CaptionRecord`] per line.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ArrayContainer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub modality: Modality,
    pub candidates: Vec<String>,
    /// Label extracted from each candidate (null where extraction failed).
    #[serde(default)]
    pub votes: Vec<Option<String>>,
    pub winner: Option<String>,
    pub filtered: bool,
    pub reason: Option<String>,
    /// `file#entry` into a `VAEM` container, relative to the store's directory.
    pub embedding_ref: Option<String>,
}

impl CaptionRecord {
    pub fn key(&self) -> (String, Modality) {
        (self.sample_id.clone(), self.modality)
    }

    /// Usable for knowledge injection: kept by the filter and has a winner.
    pub fn is_usable(&self) -> bool {
        !self.filtered && self.winner.is_some()
    }
}

pub fn to_jsonl(records: &[CaptionRecord]) -> Result<String> {
    check_unique(records)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serialisable"));
        out.push('\n');
    }
    Ok(out)
}

fn check_unique(records: &[CaptionRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.key()) {
            return Err(Error::Data(format!(
                "duplicate caption record for ({}, {})",
                r.sample_id,
                r.modality.code()
            )));
        }
    }
    Ok(())
}

pub fn persist_caption_store(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let text = to_jsonl(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_caption_store(text: &str) -> Result<Vec<CaptionRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CaptionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    check_unique(&records)?;
    Ok(records)
}

pub fn load_caption_store(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_caption_store(&text)
}

/// Text embeddings of caption winners keyed by `(sample_id, modality)`.
pub type CaptionEmbeddings = BTreeMap<(String, Modality), Tensor>;

/// Resolves every usable record's `embedding_ref` against `root`.
pub fn load_caption_embeddings(
    root: &Path,
    records: &[CaptionRecord],
) -> Result<CaptionEmbeddings> {
    let mut files: BTreeMap<String, ArrayContainer> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_usable()) {
        let Some(reference) = &r.embedding_ref else {
            continue;
        };
        let (file, entry) = reference.split_once('#').ok_or_else(|| {
            Error::Data(format!("embedding_ref `{reference}` lacks a `#entry` part"))
        })?;
        if !files.contains_key(file) {
            files.insert(file.to_string(), ArrayContainer::read(&root.join(file))?);
        }
        let t = files[file].require(entry)?.clone();
        out.insert(r.key(), t);
    }
    Ok(out)
}
