//! Exact k-nearest-neighbor classification and grid search.
//!
//! Tie rules, applied identically everywhere:
//! * neighbors are ordered by `(distance, training index)`, so at equal
//!   distance the earlier training point is preferred;
//! * among classes with equal score, the one with the smaller summed
//!   neighbor distance wins, then the lexicographically smaller code.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::ConfusionMatrix;
use crate::fvec;
use crate::taxonomy::{Level, Taxonomy};

/// Distance floor for inverse-distance weights.
pub const INVERSE_DISTANCE_EPS: f64 = 1e-12;

const MODEL_MAGIC: [u8; 4] = *b"BSDK";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Manhattan,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Euclidean, Metric::Manhattan, Metric::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
            Metric::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    InverseDistance,
}

impl Weighting {
    pub const ALL: [Weighting; 2] = [Weighting::Uniform, Weighting::InverseDistance];

    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::InverseDistance => "inverse_distance",
        }
    }
}

macro_rules! impl_str_enum {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown {} `{s}`", stringify!($ty).to_lowercase())))
            }
        }
    };
}

impl_str_enum!(Metric);
impl_str_enum!(Weighting);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
    pub weighting: Weighting,
}

impl KnnConfig {
    pub fn new(k: usize, metric: Metric, weighting: Weighting) -> Self {
        KnnConfig { k, metric, weighting }
    }
}

impl fmt::Display for KnnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k={} {} {}", self.k, self.metric, self.weighting)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm_sq(a: &[f32]) -> f64 {
    dot(a, a)
}

#[inline]
fn raw_distance(metric: Metric, a: &[f32], a_norm_sq: f64, b: &[f32], b_norm_sq: f64) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        Metric::Manhattan => a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum(),
        Metric::Cosine => {
            let cos = dot(a, b) / (a_norm_sq * b_norm_sq).sqrt();
            (1.0 - cos).max(0.0)
        }
    }
}

/// Euclidean, Manhattan or cosine distance (`1 − cos θ`).
pub fn distance(metric: Metric, a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (an, bn) = match metric {
        Metric::Cosine => {
            let (an, bn) = (norm_sq(a), norm_sq(b));
            if an == 0.0 || bn == 0.0 {
                return Err(Error::ZeroVector);
            }
            (an, bn)
        }
        _ => (0.0, 0.0),
    };
    Ok(raw_distance(metric, a, an, b, bn))
}

/// Row-major vectors with a label and id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    ids: Vec<String>,
    labels: Vec<String>,
    dims: usize,
    data: Vec<f32>,
}

impl LabeledSet {
    pub fn new(ids: Vec<String>, labels: Vec<String>, dims: usize, data: Vec<f32>) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: labels.len(),
            });
        }
        if data.len() != labels.len() * dims {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: labels.len() * dims,
            });
        }
        if dims == 0 && !labels.is_empty() {
            return Err(Error::Empty("vector dimensionality"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("labeled vectors".into()));
        }
        Ok(LabeledSet { ids, labels, dims, data })
    }

    pub fn from_rows(ids: Vec<String>, labels: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dims);
        for row in rows {
            if row.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        LabeledSet::new(ids, labels, dims, data)
    }

    /// Rows identified by their index.
    pub fn anonymous(labels: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let ids = (0..labels.len()).map(|i| i.to_string()).collect();
        LabeledSet::from_rows(ids, labels, rows)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dims.max(1))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Same vectors, labels mapped to their top-level parents.
    pub fn collapse(&self, taxonomy: &Taxonomy) -> Result<LabeledSet> {
        Ok(LabeledSet {
            labels: taxonomy.collapse_labels(&self.labels)?,
            ..self.clone()
        })
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        LabeledSet {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            dims: self.dims,
            data,
        }
    }

    /// Checks every label is a valid class at `level`.
    pub fn check_labels(&self, taxonomy: &Taxonomy, level: Level) -> Result<()> {
        for (i, label) in self.labels.iter().enumerate() {
            if !taxonomy.is_valid(label, level) {
                return Err(Error::UnknownCode {
                    code: label.clone(),
                    index: Some(i),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over the sorted row ids; equal for sets drawn from the same split.
    pub fn split_fingerprint(&self) -> String {
        let mut ids: Vec<&str> = self.ids.iter().map(String::as_str).collect();
        ids.sort_unstable();
        let mut hasher = Sha256::new();
        for id in ids {
            hasher.update(id.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ordering used for neighbor selection.
#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Per-class score and summed distance; returns the winning class index.
fn vote(neighbors: &[(f64, usize)], class_of: &[usize], n_classes: usize, weighting: Weighting) -> (usize, Vec<f64>) {
    let mut scores = vec![0.0f64; n_classes];
    let mut dist_sums = vec![0.0f64; n_classes];
    for &(d, idx) in neighbors {
        let c = class_of[idx];
        scores[c] += match weighting {
            Weighting::Uniform => 1.0,
            Weighting::InverseDistance => 1.0 / d.max(INVERSE_DISTANCE_EPS),
        };
        dist_sums[c] += d;
    }
    let mut best = usize::MAX;
    for c in 0..n_classes {
        if scores[c] == 0.0 {
            continue;
        }
        // classes are sorted by code, so scanning upward keeps the smaller code on full ties
        if best == usize::MAX
            || scores[c] > scores[best]
            || (scores[c] == scores[best] && dist_sums[c] < dist_sums[best])
        {
            best = c;
        }
    }
    (best, scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    /// Vote score of every class that received a neighbor.
    pub scores: BTreeMap<String, f64>,
}

/// Frozen training data plus configuration.
#[derive(Debug, Clone)]
pub struct KnnModel {
    train: LabeledSet,
    config: KnnConfig,
    level: Level,
    classes: Vec<String>,
    class_of: Vec<usize>,
    norms_sq: Vec<f64>,
}

impl KnnModel {
    pub fn new(train: LabeledSet, config: KnnConfig, level: Level) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("k-NN training set"));
        }
        if config.k == 0 || config.k > train.len() {
            return Err(Error::InvalidParameter(format!(
                "k = {} must be in 1..={}",
                config.k,
                train.len()
            )));
        }
        let classes: Vec<String> = train.labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let class_of = train.labels.iter().map(|l| index[l.as_str()]).collect();
        let norms_sq: Vec<f64> = train.rows().map(norm_sq).collect();
        if config.metric == Metric::Cosine && norms_sq.contains(&0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(KnnModel {
            train,
            config,
            level,
            classes,
            class_of,
            norms_sq,
        })
    }

    pub fn config(&self) -> KnnConfig {
        self.config
    }

    pub fn label_level(&self) -> Level {
        self.level
    }

    pub fn train(&self) -> &LabeledSet {
        &self.train
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn check_query(&self, query: &[f32]) -> Result<f64> {
        if query.len() != self.train.dims {
            return Err(Error::DimensionMismatch {
                expected: self.train.dims,
                found: query.len(),
            });
        }
        let qn = if self.config.metric == Metric::Cosine {
            let qn = norm_sq(query);
            if qn == 0.0 {
                return Err(Error::ZeroVector);
            }
            qn
        } else {
            0.0
        };
        Ok(qn)
    }

    /// The `k` nearest training points as `(distance, training index)`, nearest first.
    pub fn neighbors(&self, query: &[f32], k: usize) -> Result<Vec<(f64, usize)>> {
        let qn = self.check_query(query)?;
        Ok(nearest(&self.train, &self.norms_sq, self.config.metric, query, qn, k))
    }

    pub fn predict(&self, query: &[f32]) -> Result<Prediction> {
        let neighbors = self.neighbors(query, self.config.k)?;
        let (winner, scores) = vote(&neighbors, &self.class_of, self.classes.len(), self.config.weighting);
        Ok(Prediction {
            label: self.classes[winner].clone(),
            scores: self
                .classes
                .iter()
                .zip(scores)
                .filter(|(_, s)| *s > 0.0)
                .map(|(c, s)| (c.clone(), s))
                .collect(),
        })
    }

    /// Predicted labels for every row of `queries`, in row order.
    pub fn predict_set(&self, queries: &LabeledSet) -> Result<Vec<String>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        (0..queries.len())
            .into_par_iter()
            .map(|i| self.predict(queries.row(i)).map(|p| p.label))
            .collect()
    }

    /// Writes the model container: magic `BSDK`, u32 LE version, u32 LE header
    /// length, a JSON header (config, level, ids, labels), then the training
    /// matrix as an FVEC block.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = ModelHeader {
            config: self.config,
            label_level: self.level,
            ids: self.train.ids.clone(),
            labels: self.train.labels.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        fvec::write_block(w, self.train.len(), self.train.dims, &self.train.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        KnnModel::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut prefix = [0u8; 12];
        r.read_exact(&mut prefix)
            .map_err(|e| Error::Format(format!("truncated model header: {e}")))?;
        if prefix[..4] != MODEL_MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let len = u32::from_le_bytes(prefix[8..12].try_into().unwrap()) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|e| Error::Format(format!("truncated model header: {e}")))?;
        let header: ModelHeader = serde_json::from_slice(&json)?;
        let (n, d, data) = fvec::read_block(r)?;
        if n != header.labels.len() {
            return Err(Error::Format(format!(
                "model has {} labels but {n} training rows",
                header.labels.len()
            )));
        }
        let train = LabeledSet::new(header.ids, header.labels, d, data)?;
        KnnModel::new(train, header.config, header.label_level)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: KnnConfig,
    label_level: Level,
    ids: Vec<String>,
    labels: Vec<String>,
}

fn nearest(train: &LabeledSet, norms_sq: &[f64], metric: Metric, query: &[f32], query_norm_sq: f64, k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = train
        .rows()
        .zip(norms_sq)
        .enumerate()
        .map(|(i, (row, &rn))| (raw_distance(metric, query, query_norm_sq, row, rn), i))
        .collect();
    let k = k.min(all.len());
    if k < all.len() {
        all.select_nth_unstable_by(k, by_distance_then_index);
        all.truncate(k);
    }
    all.sort_unstable_by(by_distance_then_index);
    all
}

/// Hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub ks: Vec<usize>,
    pub metrics: Vec<Metric>,
    pub weightings: Vec<Weighting>,
}

impl Default for GridSpace {
    /// Odd k from 1 to 49, all metrics, all weightings (150 configurations).
    fn default() -> Self {
        GridSpace {
            ks: (1..=49).step_by(2).collect(),
            metrics: Metric::ALL.to_vec(),
            weightings: Weighting::ALL.to_vec(),
        }
    }
}

impl GridSpace {
    pub fn len(&self) -> usize {
        self.ks.len() * self.metrics.len() * self.weightings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Configurations in row-major order: k, then metric, then weighting.
    pub fn configs(&self) -> Vec<KnnConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &k in &self.ks {
            for &metric in &self.metrics {
                for &weighting in &self.weightings {
                    out.push(KnnConfig { k, metric, weighting });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: KnnConfig,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    /// `holdout` or `cv-<folds>`.
    pub mode: String,
    /// Sorted by accuracy, then macro-F1, descending; remaining ties keep grid order.
    pub rows: Vec<GridRow>,
    pub best: KnnConfig,
    /// Accuracy of the best row minus that of the 100th (or last) row.
    pub top100_spread: f64,
}

impl GridSearchReport {
    fn from_scores(mode: String, configs: Vec<KnnConfig>, scores: Vec<(f64, f64)>) -> Self {
        let mut rows: Vec<GridRow> = configs
            .into_iter()
            .zip(scores)
            .map(|(config, (accuracy, macro_f1))| GridRow {
                config,
                accuracy,
                macro_f1,
            })
            .collect();
        rows.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(b.macro_f1.total_cmp(&a.macro_f1)));
        let last = rows.len().min(100) - 1;
        GridSearchReport {
            mode,
            best: rows[0].config,
            top100_spread: rows[0].accuracy - rows[last].accuracy,
            rows,
        }
    }
}

fn validate_space(space: &GridSpace, train_len: usize) -> Result<()> {
    if space.is_empty() {
        return Err(Error::Empty("grid search space"));
    }
    if let Some(&bad) = space.ks.iter().find(|&&k| k == 0 || k > train_len) {
        return Err(Error::InvalidParameter(format!(
            "grid k = {bad} must be in 1..={train_len}"
        )));
    }
    Ok(())
}

/// `(accuracy, macro-F1)` of every configuration in `space.configs()` order.
fn score_space(train: &LabeledSet, eval: &LabeledSet, space: &GridSpace) -> Result<Vec<(f64, f64)>> {
    if eval.dims() != train.dims() {
        return Err(Error::DimensionMismatch {
            expected: train.dims(),
            found: eval.dims(),
        });
    }
    let classes: Vec<String> = train
        .labels()
        .iter()
        .chain(eval.labels())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let class_of: Vec<usize> = train.labels().iter().map(|l| index[l.as_str()]).collect();
    let truth: Vec<usize> = eval.labels().iter().map(|l| index[l.as_str()]).collect();
    let norms_sq: Vec<f64> = train.rows().map(norm_sq).collect();
    let k_max = *space.ks.iter().max().expect("non-empty space");

    let mut per_metric: HashMap<Metric, Vec<Vec<(f64, usize)>>> = HashMap::new();
    for &metric in &space.metrics {
        if metric == Metric::Cosine && norms_sq.contains(&0.0) {
            return Err(Error::ZeroVector);
        }
        let lists = (0..eval.len())
            .into_par_iter()
            .map(|q| {
                let query = eval.row(q);
                let qn = norm_sq(query);
                if metric == Metric::Cosine && qn == 0.0 {
                    return Err(Error::ZeroVector);
                }
                Ok(nearest(train, &norms_sq, metric, query, qn, k_max))
            })
            .collect::<Result<Vec<_>>>()?;
        per_metric.insert(metric, lists);
    }

    Ok(space
        .configs()
        .par_iter()
        .map(|cfg| {
            let lists = &per_metric[&cfg.metric];
            let pairs = lists.iter().zip(&truth).map(|(list, &t)| {
                let (winner, _) = vote(&list[..cfg.k], &class_of, classes.len(), cfg.weighting);
                (t, winner)
            });
            let cm = ConfusionMatrix::from_indices(classes.clone(), pairs);
            (cm.accuracy(), cm.macro_averages().f1)
        })
        .collect())
}

/// Scores every configuration on the held-out `eval` set.
pub fn grid_search(train: &LabeledSet, eval: &LabeledSet, space: &GridSpace) -> Result<GridSearchReport> {
    if train.is_empty() {
        return Err(Error::Empty("grid search training set"));
    }
    if eval.is_empty() {
        return Err(Error::Empty("grid search evaluation set"));
    }
    validate_space(space, train.len())?;
    let scores = score_space(train, eval, space)?;
    Ok(GridSearchReport::from_scores("holdout".into(), space.configs(), scores))
}

/// Stratified `folds`-fold cross-validation on the training set only; each
/// row carries fold-averaged accuracy and macro-F1.
///
/// Fold assignment: rows of each class (classes in code order, rows in set
/// order) are shuffled by a ChaCha8 stream seeded with `seed`, then dealt
/// round-robin with a counter that runs on across classes.
pub fn grid_search_cv(train: &LabeledSet, space: &GridSpace, folds: usize, seed: u64) -> Result<GridSearchReport> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}")));
    }
    if train.len() < folds {
        return Err(Error::InvalidParameter(format!(
            "{} training rows cannot fill {folds} folds",
            train.len()
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in train.labels().iter().enumerate() {
        by_class.entry(l.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; train.len()];
    let mut counter = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of[i] = counter % folds;
            counter += 1;
        }
    }
    let min_train = train.len() - (0..folds).map(|f| fold_of.iter().filter(|&&x| x == f).count()).max().unwrap_or(0);
    validate_space(space, min_train)?;

    let mut totals = vec![(0.0, 0.0); space.len()];
    for f in 0..folds {
        let (fit_idx, held_idx): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| fold_of[i] != f);
        let scores = score_space(&train.subset(&fit_idx), &train.subset(&held_idx), space)?;
        for (t, s) in totals.iter_mut().zip(scores) {
            t.0 += s.0;
            t.1 += s.1;
        }
    }
    let scores = totals
        .into_iter()
        .map(|(a, f1)| (a / folds as f64, f1 / folds as f64))
        .collect();
    Ok(GridSearchReport::from_scores(format!("cv-{folds}"), space.configs(), scores))
}
