//! Manifest-backed vector sets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use broadsound::dataset::{DatasetManifest, SoundRecord, Split};
use broadsound::fvec::FeatureMatrix;
use broadsound::knn::LabeledSet;
use broadsound::repr::{ReprKind, ReprPipeline};
use serde::{Deserialize, Serialize};

use crate::failure::{Context, Failure};

fn load_matrices(manifest: &DatasetManifest, records: &[&SoundRecord], feature_set: &str) -> Result<Vec<FeatureMatrix>, Failure> {
    records
        .iter()
        .map(|r| {
            let rel = r.features.get(feature_set).ok_or_else(|| {
                Failure::Data(format!("sound {} has no `{feature_set}` features", r.sound_id))
            })?;
            let path = manifest.resolve_path(rel);
            FeatureMatrix::read_file(&path, r.sound_id.clone()).at(&path)
        })
        .collect()
}

fn split_records(manifest: &DatasetManifest, split: Split) -> Result<Vec<&SoundRecord>, Failure> {
    let records: Vec<&SoundRecord> = manifest.in_split(split).collect();
    if records.is_empty() {
        let name = if split == Split::Train { "train" } else { "eval" };
        return Err(Failure::Data(format!(
            "manifest has no {name} records; assign a split first"
        )));
    }
    Ok(records)
}

fn vectors(pipeline: &ReprPipeline, records: &[&SoundRecord], matrices: &[FeatureMatrix]) -> Result<LabeledSet, Failure> {
    let rows = matrices.iter().map(|m| pipeline.build(m)).collect::<Result<Vec<_>, _>>()?;
    let ids = records.iter().map(|r| r.sound_id.clone()).collect();
    let labels = records.iter().map(|r| r.second_label.clone()).collect();
    Ok(LabeledSet::from_rows(ids, labels, &rows)?)
}

/// Fits `kind` on the training split and returns it with second-level
/// labelled train and eval sets, both in manifest order.
pub fn represent(
    manifest: &DatasetManifest,
    kind: ReprKind,
    feature_set: &str,
    pca_dims: usize,
) -> Result<(ReprPipeline, LabeledSet, LabeledSet), Failure> {
    let train_records = split_records(manifest, Split::Train)?;
    let eval_records = split_records(manifest, Split::Eval)?;
    log::info!(
        "loading `{feature_set}` features: {} train, {} eval",
        train_records.len(),
        eval_records.len()
    );
    let train_m = load_matrices(manifest, &train_records, feature_set)?;
    let eval_m = load_matrices(manifest, &eval_records, feature_set)?;
    let pipeline = ReprPipeline::fit(kind, &train_m, pca_dims)?;
    let train = vectors(&pipeline, &train_records, &train_m)?;
    let eval = vectors(&pipeline, &eval_records, &eval_m)?;
    Ok((pipeline, train, eval))
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    sound_id: String,
    label: String,
}

/// Writes `<stem>.fvec` (one row per sound) and `<stem>.jsonl` (ids and labels).
pub fn write_set(dir: &Path, stem: &str, set: &LabeledSet) -> Result<(), Failure> {
    let fvec = dir.join(format!("{stem}.fvec"));
    FeatureMatrix::new(stem, set.len(), set.dims(), set.data().to_vec())
        .and_then(|m| m.write_file(&fvec))
        .at(&fvec)?;
    let index = dir.join(format!("{stem}.jsonl"));
    let mut w = BufWriter::new(File::create(&index).at(&index)?);
    for (id, label) in set.ids().iter().zip(set.labels()) {
        serde_json::to_writer(&mut w, &IndexLine { sound_id: id.clone(), label: label.clone() })?;
        w.write_all(b"\n").at(&index)?;
    }
    w.flush().at(&index)
}

pub fn read_set(dir: &Path, stem: &str) -> Result<LabeledSet, Failure> {
    let fvec = dir.join(format!("{stem}.fvec"));
    let m = FeatureMatrix::read_file(&fvec, stem).at(&fvec)?;
    let index = dir.join(format!("{stem}.jsonl"));
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(File::open(&index).at(&index)?).lines().enumerate() {
        let line = line.at(&index)?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexLine = serde_json::from_str(&line)
            .map_err(|e| Failure::Data(format!("{}: line {}: {e}", index.display(), i + 1)))?;
        ids.push(entry.sound_id);
        labels.push(entry.label);
    }
    let dims = m.dims();
    LabeledSet::new(ids, labels, dims, m.into_values()).at(&index)
}
