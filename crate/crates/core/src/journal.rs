//! Append-only JSON Lines journal of human feature annotations.
//!
//! The current annotation for a `(sae_id, task_id, feature_index)` key is the
//! one with the latest timestamp; equal timestamps go to the later write.
//! Replaying the file from empty rebuilds the same map.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpret::{feature_table, table_csv, ReportJson};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal {path}: malformed line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("annotation label must not be empty")]
    EmptyLabel,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = JournalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Theme {
    Methodology,
    PublicationType,
    FieldTechnology,
    Jargon,
    Ambiguous,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub feature_index: usize,
    pub sae_id: String,
    pub task_id: String,
    pub label_text: String,
    pub theme: Theme,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnnotationKey {
    pub sae_id: String,
    pub task_id: String,
    pub feature_index: usize,
}

impl AnnotationKey {
    pub fn new(sae_id: &str, task_id: &str, feature_index: usize) -> Self {
        Self { sae_id: sae_id.to_owned(), task_id: task_id.to_owned(), feature_index }
    }
}

impl Annotation {
    pub fn key(&self) -> AnnotationKey {
        AnnotationKey::new(&self.sae_id, &self.task_id, self.feature_index)
    }
}

fn apply(current: &mut BTreeMap<AnnotationKey, Annotation>, annotation: &Annotation) {
    let key = annotation.key();
    match current.get(&key) {
        Some(existing) if existing.timestamp > annotation.timestamp => {}
        _ => {
            current.insert(key, annotation.clone());
        }
    }
}

/// Current-annotation map obtained by replaying `history` in order.
pub fn replay<'a>(history: impl IntoIterator<Item = &'a Annotation>) -> BTreeMap<AnnotationKey, Annotation> {
    let mut current = BTreeMap::new();
    for a in history {
        apply(&mut current, a);
    }
    current
}

#[derive(Debug, Default)]
struct State {
    history: Vec<Annotation>,
    current: BTreeMap<AnnotationKey, Annotation>,
}

/// Journal file plus its replayed state. Reads take a shared lock; writes go
/// through a single appender.
#[derive(Debug)]
pub struct AnnotationJournal {
    path: PathBuf,
    appender: Mutex<File>,
    state: RwLock<State>,
}

impl AnnotationJournal {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut history = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let a: Annotation = serde_json::from_str(&line).map_err(|e| JournalError::Malformed {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                history.push(a);
            }
        }
        let current = replay(&history);
        let appender = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, appender: Mutex::new(appender), state: RwLock::new(State { history, current }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably appends one annotation and updates the current map.
    pub fn append(&self, annotation: Annotation) -> Result<Annotation> {
        if annotation.label_text.trim().is_empty() {
            return Err(JournalError::EmptyLabel);
        }
        let line = serde_json::to_string(&annotation).expect("annotation serializes");
        let mut file = self.appender.lock().expect("appender lock");
        writeln!(file, "{line}")?;
        file.sync_data()?;
        let mut state = self.state.write().expect("state lock");
        apply(&mut state.current, &annotation);
        state.history.push(annotation);
        Ok(state.current[&state.history.last().expect("just pushed").key()].clone())
    }

    pub fn current(&self, key: &AnnotationKey) -> Option<Annotation> {
        self.state.read().expect("state lock").current.get(key).cloned()
    }

    pub fn current_map(&self) -> BTreeMap<AnnotationKey, Annotation> {
        self.state.read().expect("state lock").current.clone()
    }

    pub fn history(&self) -> Vec<Annotation> {
        self.state.read().expect("state lock").history.clone()
    }

    pub fn label(&self, sae_id: &str, task_id: &str, feature_index: usize) -> Option<String> {
        self.current(&AnnotationKey::new(sae_id, task_id, feature_index)).map(|a| a.label_text)
    }
}

/// Labeled feature table for one task as CSV with columns
/// `setting,index,sign,description`.
pub fn export_annotated_table(report: &ReportJson, annotations: &BTreeMap<AnnotationKey, Annotation>, task_id: &str) -> String {
    let label = |sae: &str, task: &str, idx: usize| annotations.get(&AnnotationKey::new(sae, task, idx)).map(|a| a.label_text.clone());
    table_csv(&feature_table(report, task_id, &label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ann(idx: usize, label: &str, secs: i64) -> Annotation {
        Annotation {
            feature_index: idx,
            sae_id: "sae".into(),
            task_id: "citation_count".into(),
            label_text: label.into(),
            theme: Theme::PublicationType,
            annotator: "analyst".into(),
            timestamp: Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap(),
        }
    }

    #[test]
    fn later_timestamp_wins_history_kept() {
        let dir = tempfile::tempdir().unwrap();
        let j = AnnotationJournal::open(dir.path().join("journal.jsonl")).unwrap();
        j.append(ann(5, "first", 10)).unwrap();
        j.append(ann(5, "older", 5)).unwrap();
        j.append(ann(5, "second", 20)).unwrap();
        assert_eq!(j.label("sae", "citation_count", 5).as_deref(), Some("second"));
        assert_eq!(j.history().len(), 3);
    }

    #[test]
    fn reopen_replays_same_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");
        let j = AnnotationJournal::open(&path).unwrap();
        for (i, a) in [ann(1, "a", 3), ann(2, "b", 1), ann(1, "c", 2)].into_iter().enumerate() {
            assert_eq!(j.append(a).unwrap().feature_index, [1, 2, 1][i]);
        }
        let before = j.current_map();
        drop(j);
        let j = AnnotationJournal::open(&path).unwrap();
        assert_eq!(j.current_map(), before);
        assert_eq!(j.label("sae", "citation_count", 1).as_deref(), Some("a"));
    }

    #[test]
    fn malformed_line_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");
        let good = serde_json::to_string(&ann(1, "x", 0)).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = AnnotationJournal::open(&path).unwrap_err();
        assert!(matches!(err, JournalError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let j = AnnotationJournal::open(dir.path().join("j.jsonl")).unwrap();
        assert!(matches!(j.append(ann(1, "  ", 0)), Err(JournalError::EmptyLabel)));
        assert!(j.history().is_empty());
    }

    #[test]
    fn concurrent_appends_all_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let j = std::sync::Arc::new(AnnotationJournal::open(&path).unwrap());
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let j = j.clone();
                std::thread::spawn(move || j.append(ann(3, &format!("label {i}"), i)).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(j.label("sae", "citation_count", 3).as_deref(), Some("label 7"));
        let reopened = AnnotationJournal::open(&path).unwrap();
        assert_eq!(reopened.history().len(), 8);
        assert_eq!(reopened.current_map(), j.current_map());
    }
}
