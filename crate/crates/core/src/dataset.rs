//! Sound records, the line-delimited manifest, and the stratified split.
//!
//! Manifest files are UTF-8 JSON lines. An optional first line carrying a
//! `format` key is the header:
//!
//! ```text
//! {"format":"bsd-manifest","version":1,"taxonomy_version":"bst-1.0","feature_set_ids":["clap"]}
//! {"sound_id":"1234","second_label":"solo-speech","duration_s":4.2,"split":"train","audio_path":"audio/1234.wav","features":{"clap":"clap/1234.fvec"}}
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MAX_DURATION_S;
use crate::error::{Error, Result};
use crate::taxonomy::{Level, Taxonomy};

pub const MANIFEST_FORMAT: &str = "bsd-manifest";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    #[default]
    Unassigned,
}

/// Annotator confidence. The scale is three-point ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl Confidence {
    pub const ALL: [Confidence; 3] = [Confidence::Low, Confidence::Medium, Confidence::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Confidence::Low => "low",
            Confidence::Medium => "medium",
            Confidence::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundRecord {
    pub sound_id: String,
    pub second_label: String,
    pub duration_s: f64,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_confidence: Option<Confidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    /// Feature set id → FVEC file path.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, String>,
}

impl SoundRecord {
    pub fn new(sound_id: impl Into<String>, second_label: impl Into<String>, duration_s: f64) -> Self {
        SoundRecord {
            sound_id: sound_id.into(),
            second_label: second_label.into(),
            duration_s,
            split: Split::Unassigned,
            title: None,
            tags: Vec::new(),
            annotator_confidence: None,
            audio_path: None,
            features: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    #[serde(default)]
    taxonomy_version: String,
    #[serde(default)]
    feature_set_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SoundRecord>,
    pub taxonomy_version: String,
    pub feature_set_ids: Vec<String>,
    /// Directory that relative paths resolve against.
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SoundRecord>, taxonomy_version: impl Into<String>) -> Self {
        let mut feature_set_ids: Vec<String> = records
            .iter()
            .flat_map(|r| r.features.keys().cloned())
            .collect();
        feature_set_ids.sort();
        feature_set_ids.dedup();
        DatasetManifest {
            records,
            taxonomy_version: taxonomy_version.into(),
            feature_set_ids,
            base_dir: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sound_id: &str) -> Option<&SoundRecord> {
        self.records.iter().find(|r| r.sound_id == sound_id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SoundRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve_path(&self, rel: &str) -> PathBuf {
        match &self.base_dir {
            Some(base) => base.join(rel),
            None => PathBuf::from(rel),
        }
    }

    /// Rewrites abbreviated labels (e.g. `sp-c`) to canonical codes and checks
    /// every record against the taxonomy.
    pub fn normalize_labels(&mut self, taxonomy: &Taxonomy) -> Result<()> {
        for record in &mut self.records {
            if let Some(node) = taxonomy.resolve(&record.second_label) {
                record.second_label = node.code.clone();
            }
        }
        self.validate(taxonomy)
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.sound_id.as_str()) {
                return Err(Error::DuplicateSoundId(r.sound_id.clone()));
            }
            if !taxonomy.is_valid(&r.second_label, Level::Second) {
                return Err(Error::UnknownCode {
                    code: r.second_label.clone(),
                    index: Some(i),
                });
            }
            if !(r.duration_s.is_finite() && (0.0..=MAX_DURATION_S as f64).contains(&r.duration_s)) {
                return Err(Error::InvalidParameter(format!(
                    "sound `{}` has duration {} s outside [0, {MAX_DURATION_S}]",
                    r.sound_id, r.duration_s
                )));
            }
        }
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut manifest = DatasetManifest::from_reader(reader)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf);
        Ok(manifest)
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<DatasetManifest> {
        let mut header: Option<ManifestHeader> = None;
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Error::Malformed(format!("manifest line {}: {e}", lineno + 1)))?;
            if value.get("format").is_some() {
                if header.is_some() || !records.is_empty() {
                    return Err(Error::Malformed(format!(
                        "manifest line {}: header must be the first line",
                        lineno + 1
                    )));
                }
                let h: ManifestHeader = serde_json::from_value(value)
                    .map_err(|e| Error::Malformed(format!("manifest header: {e}")))?;
                if h.format != MANIFEST_FORMAT || h.version != 1 {
                    return Err(Error::Malformed(format!(
                        "unsupported manifest format {} v{}",
                        h.format, h.version
                    )));
                }
                header = Some(h);
                continue;
            }
            let record: SoundRecord = serde_json::from_value(value)
                .map_err(|e| Error::Malformed(format!("manifest line {}: {e}", lineno + 1)))?;
            records.push(record);
        }
        let mut manifest = DatasetManifest::new(records, "");
        if let Some(h) = header {
            manifest.taxonomy_version = h.taxonomy_version;
            if !h.feature_set_ids.is_empty() {
                manifest.feature_set_ids = h.feature_set_ids;
            }
        }
        Ok(manifest)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            taxonomy_version: self.taxonomy_version.clone(),
            feature_set_ids: self.feature_set_ids.clone(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Marks exactly `per_class` records of every second-level class as
/// [`Split::Eval`] and all others as [`Split::Train`].
///
/// Sampling: records of each class are ordered by `sound_id`, classes are
/// visited in taxonomy order, and each class list is Fisher–Yates shuffled
/// by one ChaCha8 stream seeded with `seed`; the first `per_class` entries
/// become Eval. The result does not depend on manifest line order.
pub fn make_split(
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    manifest.validate(taxonomy)?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.second_label.as_str()).or_default().push(i);
    }
    for code in taxonomy.second_codes() {
        let available = by_class.get(code).map_or(0, Vec::len);
        if available < per_class {
            return Err(Error::InsufficientRecords {
                code: code.to_string(),
                needed: per_class,
                available,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Split::Train;
    }
    if per_class == 0 {
        return Ok(out);
    }
    for code in taxonomy.second_codes() {
        let mut members = by_class.remove(code).unwrap_or_default();
        members.sort_by(|&a, &b| manifest.records[a].sound_id.cmp(&manifest.records[b].sound_id));
        members.shuffle(&mut rng);
        for &i in &members[..per_class] {
            out.records[i].split = Split::Eval;
        }
    }
    Ok(out)
}

/// Record counts per class at `level`, including zero entries for every class.
pub fn class_distribution(
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    level: Level,
) -> Result<BTreeMap<String, usize>> {
    let mut counts: BTreeMap<String, usize> =
        taxonomy.codes(level).map(|c| (c.to_string(), 0)).collect();
    for (i, r) in manifest.records.iter().enumerate() {
        let code = taxonomy.label_at(&r.second_label, level).map_err(|_| Error::UnknownCode {
            code: r.second_label.clone(),
            index: Some(i),
        })?;
        *counts.get_mut(code).expect("level code present") += 1;
    }
    Ok(counts)
}
