//! Append-only annotation journal.
//!
//! One JSON object per line, tagged by `kind`:
//!
//! ```json
//! {"kind":"error","rev":1,"sound_id":"42","category":"acoustic_ambiguity","reviewer":"ana","timestamp":"2024-05-01T10:00:00Z"}
//! {"kind":"class","rev":2,"sound_id":"43","class_code":"animals","confidence":"high","annotator":"ana","timestamp":"2024-05-01T10:01:00Z"}
//! ```
//!
//! Every append is written as one line and synced before it is acknowledged.
//! On replay, the latest annotation per `(sound_id, reviewer)` wins, ordered
//! by timestamp and then revision. A final line without a terminating newline
//! is an unacknowledged torn write and is discarded; any other unparsable
//! line is corruption.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use broadsound::dataset::Confidence;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Error categories for misclassified sounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    AcousticAmbiguity,
    BetweenClassesDiffTop,
    BetweenClassesSameTop,
    CommonSource,
    ProminenceOneSource,
    SingleSourceEvolution,
    LowQuality,
    UncommonOther,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 8] = [
        ErrorCategory::AcousticAmbiguity,
        ErrorCategory::BetweenClassesDiffTop,
        ErrorCategory::BetweenClassesSameTop,
        ErrorCategory::CommonSource,
        ErrorCategory::ProminenceOneSource,
        ErrorCategory::SingleSourceEvolution,
        ErrorCategory::LowQuality,
        ErrorCategory::UncommonOther,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::AcousticAmbiguity => "acoustic_ambiguity",
            ErrorCategory::BetweenClassesDiffTop => "between_classes_diff_top",
            ErrorCategory::BetweenClassesSameTop => "between_classes_same_top",
            ErrorCategory::CommonSource => "common_source",
            ErrorCategory::ProminenceOneSource => "prominence_one_source",
            ErrorCategory::SingleSourceEvolution => "single_source_evolution",
            ErrorCategory::LowQuality => "low_quality",
            ErrorCategory::UncommonOther => "uncommon_other",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::AcousticAmbiguity => "Acoustic ambiguity",
            ErrorCategory::BetweenClassesDiffTop => "Between classes (different top)",
            ErrorCategory::BetweenClassesSameTop => "Between classes (same top)",
            ErrorCategory::CommonSource => "Common source",
            ErrorCategory::ProminenceOneSource => "Prominence of one source",
            ErrorCategory::SingleSourceEvolution => "Single-source evolution",
            ErrorCategory::LowQuality => "Low quality",
            ErrorCategory::UncommonOther => "Uncommon/Weird/Other",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ErrorCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error category `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub sound_id: String,
    pub category: ErrorCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAnnotation {
    pub sound_id: String,
    pub class_code: String,
    pub confidence: Confidence,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEntry {
    Error {
        rev: u64,
        #[serde(flatten)]
        annotation: ErrorAnnotation,
    },
    Class {
        rev: u64,
        #[serde(flatten)]
        annotation: ClassAnnotation,
    },
}

impl JournalEntry {
    pub fn rev(&self) -> u64 {
        match self {
            JournalEntry::Error { rev, .. } | JournalEntry::Class { rev, .. } => *rev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Revisioned<T> {
    pub rev: u64,
    #[serde(flatten)]
    pub annotation: T,
}

/// Latest-wins view of the journal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationStore {
    errors: BTreeMap<(String, String), Revisioned<ErrorAnnotation>>,
    classes: BTreeMap<(String, String), Revisioned<ClassAnnotation>>,
    last_rev: u64,
}

fn newer(ts: &DateTime<Utc>, rev: u64, than_ts: &DateTime<Utc>, than_rev: u64) -> bool {
    (ts, rev) > (than_ts, than_rev)
}

impl AnnotationStore {
    pub fn apply(&mut self, entry: JournalEntry) {
        self.last_rev = self.last_rev.max(entry.rev());
        match entry {
            JournalEntry::Error { rev, annotation } => {
                let key = (annotation.sound_id.clone(), annotation.reviewer.clone());
                let replace = self
                    .errors
                    .get(&key)
                    .is_none_or(|cur| newer(&annotation.timestamp, rev, &cur.annotation.timestamp, cur.rev));
                if replace {
                    self.errors.insert(key, Revisioned { rev, annotation });
                }
            }
            JournalEntry::Class { rev, annotation } => {
                let key = (annotation.sound_id.clone(), annotation.annotator.clone());
                let replace = self
                    .classes
                    .get(&key)
                    .is_none_or(|cur| newer(&annotation.timestamp, rev, &cur.annotation.timestamp, cur.rev));
                if replace {
                    self.classes.insert(key, Revisioned { rev, annotation });
                }
            }
        }
    }

    pub fn last_rev(&self) -> u64 {
        self.last_rev
    }

    /// Latest error annotation of every reviewer for `sound_id`.
    pub fn errors_for(&self, sound_id: &str) -> Vec<&Revisioned<ErrorAnnotation>> {
        self.errors
            .range((sound_id.to_string(), String::new())..)
            .take_while(|((s, _), _)| s == sound_id)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn classes_for(&self, sound_id: &str) -> Vec<&Revisioned<ClassAnnotation>> {
        self.classes
            .range((sound_id.to_string(), String::new())..)
            .take_while(|((s, _), _)| s == sound_id)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn error_annotations(&self) -> impl Iterator<Item = &Revisioned<ErrorAnnotation>> {
        self.errors.values()
    }

    pub fn class_annotations(&self) -> impl Iterator<Item = &Revisioned<ClassAnnotation>> {
        self.classes.values()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorReport {
    /// `majority` or `reviewer:<name>`.
    pub view: String,
    pub counts: BTreeMap<ErrorCategory, usize>,
    pub total: usize,
}

/// Per-category counts over annotated sounds.
///
/// With `reviewer` set, each sound contributes that reviewer's latest
/// category. Otherwise each sound contributes the majority category across
/// reviewers, ties going to the category listed first in
/// [`ErrorCategory::ALL`].
pub fn error_report(store: &AnnotationStore, reviewer: Option<&str>) -> ErrorReport {
    let mut counts: BTreeMap<ErrorCategory, usize> = ErrorCategory::ALL.iter().map(|&c| (c, 0)).collect();
    let mut per_sound: BTreeMap<&str, BTreeMap<ErrorCategory, usize>> = BTreeMap::new();
    for ((sound, who), entry) in &store.errors {
        if reviewer.is_some_and(|r| r != who) {
            continue;
        }
        *per_sound
            .entry(sound.as_str())
            .or_default()
            .entry(entry.annotation.category)
            .or_default() += 1;
    }
    for votes in per_sound.values() {
        let mut best = None;
        for (&category, &n) in votes {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((category, n));
            }
        }
        if let Some((category, _)) = best {
            *counts.get_mut(&category).expect("all categories present") += 1;
        }
    }
    ErrorReport {
        view: reviewer.map_or_else(|| "majority".to_string(), |r| format!("reviewer:{r}")),
        counts,
        total: per_sound.len(),
    }
}

/// Appender for the journal file.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) and replays the journal.
    pub fn open(path: impl AsRef<Path>) -> Result<(Journal, AnnotationStore), ServiceError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(|e| ServiceError::Corrupt {
            line: 0,
            message: format!("journal is not valid UTF-8: {e}"),
        })?;

        let mut store = AnnotationStore::default();
        let complete_len = text.rfind('\n').map_or(0, |i| i + 1);
        for (i, line) in text[..complete_len].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: JournalEntry = serde_json::from_str(line).map_err(|e| ServiceError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?;
            store.apply(entry);
        }
        if complete_len < text.len() {
            log::warn!(
                "{}: discarding {} bytes of unterminated trailing write",
                path.display(),
                text.len() - complete_len
            );
            file.set_len(complete_len as u64)?;
            file.sync_all()?;
        }
        Ok((Journal { path, file }, store))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one entry as a single line and syncs it to disk.
    pub fn append(&mut self, entry: &JournalEntry) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(entry).map_err(|e| ServiceError::Io(e.into()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn sync(&self) -> Result<(), ServiceError> {
        self.file.sync_all()?;
        Ok(())
    }
}

/// Journal plus its replayed view; appends are applied to both in order.
#[derive(Debug)]
pub struct Annotations {
    journal: Journal,
    store: AnnotationStore,
}

impl Annotations {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let (journal, store) = Journal::open(path)?;
        Ok(Annotations { journal, store })
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn record_error(&mut self, annotation: ErrorAnnotation) -> Result<u64, ServiceError> {
        let rev = self.store.last_rev() + 1;
        let entry = JournalEntry::Error { rev, annotation };
        self.journal.append(&entry)?;
        self.store.apply(entry);
        Ok(rev)
    }

    pub fn record_class(&mut self, annotation: ClassAnnotation) -> Result<u64, ServiceError> {
        let rev = self.store.last_rev() + 1;
        let entry = JournalEntry::Class { rev, annotation };
        self.journal.append(&entry)?;
        self.store.apply(entry);
        Ok(rev)
    }

    pub fn sync(&self) -> Result<(), ServiceError> {
        self.journal.sync()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
    }

    fn err(sound: &str, reviewer: &str, category: ErrorCategory, t: i64) -> ErrorAnnotation {
        ErrorAnnotation {
            sound_id: sound.into(),
            category,
            note: None,
            reviewer: reviewer.into(),
            timestamp: ts(t),
        }
    }

    #[test]
    fn revisions_increase_and_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut a = Annotations::open(&path).unwrap();
        let r1 = a.record_error(err("s1", "ana", ErrorCategory::LowQuality, 0)).unwrap();
        let r2 = a.record_error(err("s1", "ana", ErrorCategory::CommonSource, 1)).unwrap();
        assert!(r2 > r1);
        let latest = a.store().errors_for("s1");
        assert_eq!(latest.len(), 1);
        assert_eq!(latest[0].annotation.category, ErrorCategory::CommonSource);

        // an older timestamp does not override, even with a higher revision
        a.record_error(err("s1", "ana", ErrorCategory::AcousticAmbiguity, -5)).unwrap();
        assert_eq!(a.store().errors_for("s1")[0].annotation.category, ErrorCategory::CommonSource);

        // same timestamp: higher revision wins
        a.record_error(err("s1", "ana", ErrorCategory::UncommonOther, 1)).unwrap();
        assert_eq!(a.store().errors_for("s1")[0].annotation.category, ErrorCategory::UncommonOther);
    }

    #[test]
    fn replay_reproduces_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut a = Annotations::open(&path).unwrap();
        for i in 0..10 {
            a.record_error(err(&format!("s{}", i % 4), "ana", ErrorCategory::ALL[i % 8], i as i64)).unwrap();
        }
        a.record_class(ClassAnnotation {
            sound_id: "s9".into(),
            class_code: "animals".into(),
            confidence: Confidence::Medium,
            annotator: "bo".into(),
            timestamp: ts(3),
        })
        .unwrap();
        let before = a.store().clone();
        drop(a);
        let b = Annotations::open(&path).unwrap();
        assert_eq!(b.store(), &before);
        assert_eq!(b.store().last_rev(), 11);
    }

    #[test]
    fn torn_tail_is_discarded_and_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let mut a = Annotations::open(&path).unwrap();
            a.record_error(err("s1", "ana", ErrorCategory::LowQuality, 0)).unwrap();
        }
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"kind\":\"error\",\"rev\":2,\"sound");
        std::fs::write(&path, &text).unwrap();
        let mut a = Annotations::open(&path).unwrap();
        assert_eq!(a.store().last_rev(), 1);
        assert_eq!(a.record_error(err("s2", "ana", ErrorCategory::LowQuality, 1)).unwrap(), 2);
        drop(a);
        assert_eq!(Annotations::open(&path).unwrap().store().last_rev(), 2);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.insert_str(0, "not json\n");
        std::fs::write(&path, &text).unwrap();
        match Annotations::open(&path) {
            Err(ServiceError::Corrupt { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_counts_and_views() {
        let mut store = AnnotationStore::default();
        let entries = [
            ("s1", "ana", ErrorCategory::AcousticAmbiguity),
            ("s2", "ana", ErrorCategory::AcousticAmbiguity),
            ("s3", "ana", ErrorCategory::CommonSource),
            ("s4", "ana", ErrorCategory::LowQuality),
            ("s5", "ana", ErrorCategory::LowQuality),
            ("s1", "bo", ErrorCategory::LowQuality),
            ("s1", "cy", ErrorCategory::LowQuality),
        ];
        for (i, (s, r, c)) in entries.into_iter().enumerate() {
            store.apply(JournalEntry::Error {
                rev: i as u64 + 1,
                annotation: err(s, r, c, i as i64),
            });
        }
        let ana = error_report(&store, Some("ana"));
        assert_eq!(ana.total, 5);
        assert_eq!(ana.counts[&ErrorCategory::AcousticAmbiguity], 2);
        assert_eq!(ana.counts.values().sum::<usize>(), 5);

        let majority = error_report(&store, None);
        assert_eq!(majority.total, 5);
        // s1: low_quality 2 votes vs acoustic_ambiguity 1
        assert_eq!(majority.counts[&ErrorCategory::AcousticAmbiguity], 1);
        assert_eq!(majority.counts[&ErrorCategory::LowQuality], 3);

        let empty = error_report(&AnnotationStore::default(), None);
        assert_eq!(empty.total, 0);
        assert_eq!(empty.counts.len(), 8);
        assert!(empty.counts.values().all(|&n| n == 0));
    }

    #[test]
    fn majority_ties_follow_category_order() {
        let mut store = AnnotationStore::default();
        store.apply(JournalEntry::Error { rev: 1, annotation: err("s", "a", ErrorCategory::LowQuality, 0) });
        store.apply(JournalEntry::Error { rev: 2, annotation: err("s", "b", ErrorCategory::CommonSource, 0) });
        let r = error_report(&store, None);
        assert_eq!(r.counts[&ErrorCategory::CommonSource], 1);
        assert_eq!(r.counts[&ErrorCategory::LowQuality], 0);
    }

    #[test]
    fn category_wire_names() {
        let json = serde_json::to_string(&ErrorCategory::BetweenClassesDiffTop).unwrap();
        assert_eq!(json, "\"between_classes_diff_top\"");
        assert!("nonsense".parse::<ErrorCategory>().is_err());
        for c in ErrorCategory::ALL {
            assert_eq!(c.as_str().parse::<ErrorCategory>().unwrap(), c);
        }
    }
}
