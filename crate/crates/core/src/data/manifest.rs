//! Manifest rows and in-memory samples.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::ArrayContainer;
use crate::error::{Error, Result};
use crate::tokenizer::{AudioInput, VideoInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    /// Valence, arousal, dominance.
    Vad([f32; 3]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    /// `path` or `path#entry`, relative to the manifest directory.
    pub audio_path: String,
    pub video_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub audio: AudioInput,
    pub video: VideoInput,
    pub label: Option<Label>,
    pub fold: usize,
}

impl Sample {
    pub fn class(&self) -> Result<usize> {
        match &self.label {
            Some(Label::Class(c)) => Ok(*c),
            other => Err(Error::Data(format!(
                "sample `{}` has no class label (found {other:?})",
                self.id
            ))),
        }
    }

    pub fn vad(&self) -> Result<[f32; 3]> {
        match &self.label {
            Some(Label::Vad(v)) => Ok(*v),
            other => Err(Error::Data(format!(
                "sample `{}` has no valence/arousal/dominance label (found {other:?})",
                self.id
            ))),
        }
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("serialisable");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(row.sample_id.clone()) {
            return Err(Error::Data(format!(
                "duplicate sample id `{}`",
                row.sample_id
            )));
        }
        rows.push(row);
    }
    check_folds(&rows)?;
    Ok(rows)
}

fn check_folds(rows: &[ManifestRow]) -> Result<()> {
    let folds: HashSet<usize> = rows.iter().map(|r| r.fold).collect();
    if let Some(missing) = (0..folds.len()).find(|f| !folds.contains(f)) {
        return Err(Error::Data(format!(
            "fold indices must be contiguous from 0; fold {missing} is missing"
        )));
    }
    Ok(())
}

fn split_ref(reference: &str, default_entry: &str) -> (String, String) {
    match reference.split_once('#') {
        Some((p, e)) => (p.to_string(), e.to_string()),
        None => (reference.to_string(), default_entry.to_string()),
    }
}

/// Loads every manifest row's arrays, resolving paths against `root`.
pub fn load_samples(root: &Path, rows: &[ManifestRow]) -> Result<Vec<Sample>> {
    let mut cache: Option<(PathBuf, ArrayContainer)> = None;
    let mut fetch = |reference: &str, entry: &str| -> Result<crate::tensor::Tensor> {
        let (p, e) = split_ref(reference, entry);
        let path = root.join(&p);
        if cache.as_ref().map(|(cp, _)| cp != &path).unwrap_or(true) {
            if !path.exists() {
                return Err(Error::Data(format!(
                    "array file {} does not exist",
                    path.display()
                )));
            }
            cache = Some((path.clone(), ArrayContainer::read(&path)?));
        }
        let (_, c) = cache.as_ref().expect("filled above");
        c.require(&e).cloned()
    };
    rows.iter()
        .map(|row| {
            let audio = AudioInput::new(fetch(&row.audio_path, "audio")?)?;
            let video = VideoInput::new(fetch(&row.video_path, "video")?)?;
            Ok(Sample {
                id: row.sample_id.clone(),
                audio,
                video,
                label: row.label.clone(),
                fold: row.fold,
            })
        })
        .collect()
}
