//! Classification metrics, confusion matrices, hierarchical analyses and
//! review-queue export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::knn::{KnnModel, LabeledSet};
use crate::taxonomy::{Level, Taxonomy};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels<S: AsRef<str>, T: AsRef<str>>(classes: Vec<String>, truths: &[S], preds: &[T]) -> Result<Self> {
        if truths.len() != preds.len() {
            return Err(Error::LengthMismatch {
                left: preds.len(),
                right: truths.len(),
            });
        }
        let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let lookup = |code: &str, i: usize| {
            index.get(code).copied().ok_or_else(|| Error::UnknownCode {
                code: code.to_string(),
                index: Some(i),
            })
        };
        let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
        for (i, (t, p)) in truths.iter().zip(preds).enumerate() {
            let t = lookup(t.as_ref(), i)?;
            let p = lookup(p.as_ref(), i)?;
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    /// Builds from class indices (`truth`, `pred`) into `n_classes`.
    pub fn from_indices(classes: Vec<String>, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let n = classes.len();
        let mut counts = vec![vec![0u64; n]; n];
        for (t, p) in pairs {
            counts[t][p] += 1;
        }
        ConfusionMatrix { classes, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Per-class precision/recall/F1; zero divisions yield 0.
    pub fn class_metrics(&self) -> Vec<ClassMetrics> {
        let n = self.classes.len();
        (0..n)
            .map(|c| {
                let tp = self.counts[c][c];
                let support: u64 = self.counts[c].iter().sum();
                let predicted: u64 = (0..n).map(|r| self.counts[r][c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    code: self.classes[c].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                    predicted,
                }
            })
            .collect()
    }

    /// Unweighted mean over classes with at least one true instance.
    pub fn macro_averages(&self) -> Averages {
        let per_class = self.class_metrics();
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        if present.is_empty() {
            return Averages::default();
        }
        let n = present.len() as f64;
        Averages {
            precision: present.iter().map(|m| m.precision).sum::<f64>() / n,
            recall: present.iter().map(|m| m.recall).sum::<f64>() / n,
            f1: present.iter().map(|m| m.f1).sum::<f64>() / n,
        }
    }

    /// Support-weighted mean over classes.
    pub fn weighted_averages(&self) -> Averages {
        let per_class = self.class_metrics();
        let total = self.total();
        if total == 0 {
            return Averages::default();
        }
        let w = |f: fn(&ClassMetrics) -> f64| {
            per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
        };
        Averages {
            precision: w(|m| m.precision),
            recall: w(|m| m.recall),
            f1: w(|m| m.f1),
        }
    }

    /// CSV with a header row and a leading column of class codes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(c);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub code: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances.
    pub support: u64,
    /// Predicted instances.
    pub predicted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Misclassification {
    pub sound_id: String,
    pub true_code: String,
    pub predicted_code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub level: Level,
    pub total: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub misclassified: Vec<Misclassification>,
}

/// Evaluates positionally identified predictions (`sound_id` = index).
pub fn evaluate<S: AsRef<str>, T: AsRef<str>>(
    preds: &[S],
    truths: &[T],
    taxonomy: &Taxonomy,
    level: Level,
) -> Result<EvaluationReport> {
    let ids: Vec<String> = (0..preds.len()).map(|i| i.to_string()).collect();
    evaluate_with_ids(&ids, preds, truths, taxonomy, level)
}

/// Evaluates predictions against truths at `level`. The class order of the
/// confusion matrix is the taxonomy order at that level.
pub fn evaluate_with_ids<I: AsRef<str>, S: AsRef<str>, T: AsRef<str>>(
    ids: &[I],
    preds: &[S],
    truths: &[T],
    taxonomy: &Taxonomy,
    level: Level,
) -> Result<EvaluationReport> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    if ids.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: ids.len(),
            right: preds.len(),
        });
    }
    for (i, code) in preds.iter().map(AsRef::as_ref).chain(truths.iter().map(AsRef::as_ref)).enumerate() {
        if !taxonomy.is_valid(code, level) {
            return Err(Error::UnknownCode {
                code: code.to_string(),
                index: Some(i % preds.len().max(1)),
            });
        }
    }
    let classes: Vec<String> = taxonomy.codes(level).map(str::to_string).collect();
    let confusion = ConfusionMatrix::from_labels(classes, truths, preds)?;
    let macro_avg = confusion.macro_averages();
    let weighted = confusion.weighted_averages();
    let misclassified = ids
        .iter()
        .zip(preds.iter().zip(truths))
        .filter(|(_, (p, t))| p.as_ref() != t.as_ref())
        .map(|(id, (p, t))| Misclassification {
            sound_id: id.as_ref().to_string(),
            true_code: t.as_ref().to_string(),
            predicted_code: p.as_ref().to_string(),
        })
        .collect();
    Ok(EvaluationReport {
        level,
        total: confusion.total(),
        accuracy: confusion.accuracy(),
        macro_precision: macro_avg.precision,
        macro_recall: macro_avg.recall,
        macro_f1: macro_avg.f1,
        weighted_f1: weighted.f1,
        per_class: confusion.class_metrics(),
        confusion,
        misclassified,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub total: usize,
    pub second_accuracy: f64,
    /// Accuracy of second-level predictions mapped to their parents.
    pub collapsed_accuracy: f64,
    /// Accuracy of the dedicated top-level predictions.
    pub top_accuracy: f64,
    pub second_errors: usize,
    /// Second-level errors whose top-level prediction is the true parent.
    pub recovered_by_top: usize,
    /// `recovered_by_top / second_errors`; `None` when there are no errors.
    pub fraction: Option<f64>,
}

/// Among sounds misclassified at the second level, how many the dedicated
/// top-level classifier still gets right.
pub fn hierarchical_consistency<A: AsRef<str>, B: AsRef<str>, C: AsRef<str>>(
    second_preds: &[A],
    top_preds: &[B],
    truths: &[C],
    taxonomy: &Taxonomy,
) -> Result<ConsistencyReport> {
    let n = truths.len();
    for len in [second_preds.len(), top_preds.len()] {
        if len != n {
            return Err(Error::LengthMismatch { left: len, right: n });
        }
    }
    let mut second_correct = 0;
    let mut collapsed_correct = 0;
    let mut top_correct = 0;
    let mut second_errors = 0;
    let mut recovered = 0;
    for i in 0..n {
        let truth = truths[i].as_ref();
        let second = second_preds[i].as_ref();
        let top = top_preds[i].as_ref();
        let unknown = |code: &str| Error::UnknownCode {
            code: code.to_string(),
            index: Some(i),
        };
        if !taxonomy.is_valid(truth, Level::Second) {
            return Err(unknown(truth));
        }
        if !taxonomy.is_valid(second, Level::Second) {
            return Err(unknown(second));
        }
        if !taxonomy.is_valid(top, Level::Top) {
            return Err(unknown(top));
        }
        let true_top = taxonomy.parent_of(truth)?;
        if second == truth {
            second_correct += 1;
        } else {
            second_errors += 1;
            if top == true_top {
                recovered += 1;
            }
        }
        if taxonomy.parent_of(second)? == true_top {
            collapsed_correct += 1;
        }
        if top == true_top {
            top_correct += 1;
        }
    }
    let acc = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(ConsistencyReport {
        total: n,
        second_accuracy: acc(second_correct),
        collapsed_accuracy: acc(collapsed_correct),
        top_accuracy: acc(top_correct),
        second_errors,
        recovered_by_top: recovered,
        fraction: (second_errors > 0).then(|| recovered as f64 / second_errors as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyComparison {
    pub second_accuracy: f64,
    pub collapsed_top_accuracy: f64,
    pub dedicated_top_accuracy: f64,
    pub consistency: ConsistencyReport,
}

/// Compares collapsing a second-level model's predictions against a model
/// trained directly on top-level labels. Both must share a training split.
pub fn collapsed_vs_dedicated(
    second_model: &KnnModel,
    top_model: &KnnModel,
    eval: &LabeledSet,
    taxonomy: &Taxonomy,
) -> Result<HierarchyComparison> {
    if second_model.label_level() != Level::Second || top_model.label_level() != Level::Top {
        return Err(Error::InvalidParameter(
            "expected a second-level and a top-level model".into(),
        ));
    }
    if second_model.train().split_fingerprint() != top_model.train().split_fingerprint() {
        return Err(Error::SplitMismatch);
    }
    let second = second_model.predict_set(eval)?;
    let top = top_model.predict_set(eval)?;
    let consistency = hierarchical_consistency(&second, &top, eval.labels(), taxonomy)?;
    debug_assert!(consistency.collapsed_accuracy >= consistency.second_accuracy);
    Ok(HierarchyComparison {
        second_accuracy: consistency.second_accuracy,
        collapsed_top_accuracy: consistency.collapsed_accuracy,
        dedicated_top_accuracy: consistency.top_accuracy,
        consistency,
    })
}

/// One line of the review queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub sound_id: String,
    pub true_code: String,
    pub predicted_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReviewSample {
    All,
    Random { n: usize, seed: u64 },
}

/// Builds the review queue from a report's misclassifications, optionally a
/// seeded random subset (kept in report order).
pub fn export_misclassifications(
    report: &EvaluationReport,
    sample: ReviewSample,
    manifest: Option<&DatasetManifest>,
) -> Result<Vec<ReviewItem>> {
    let errors = &report.misclassified;
    let chosen: Vec<&Misclassification> = match sample {
        ReviewSample::All => errors.iter().collect(),
        ReviewSample::Random { n, seed } => {
            if n > errors.len() {
                return Err(Error::SampleTooLarge {
                    requested: n,
                    available: errors.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, errors.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| &errors[i]).collect()
        }
    };
    let audio_paths: HashMap<&str, &str> = manifest
        .map(|m| {
            m.records
                .iter()
                .filter_map(|r| r.audio_path.as_deref().map(|p| (r.sound_id.as_str(), p)))
                .collect()
        })
        .unwrap_or_default();
    Ok(chosen
        .into_iter()
        .map(|m| ReviewItem {
            sound_id: m.sound_id.clone(),
            true_code: m.true_code.clone(),
            predicted_code: m.predicted_code.clone(),
            audio_path: audio_paths.get(m.sound_id.as_str()).map(|p| p.to_string()),
        })
        .collect())
}

pub fn write_queue(path: impl AsRef<Path>, items: &[ReviewItem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_queue(path: impl AsRef<Path>) -> Result<Vec<ReviewItem>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("queue line {}: {e}", lineno + 1)))?;
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const THREE: &str = r#"
version = "t"
[[top]]
code = "X"
name = "X"
children = [{ code = "a", name = "A" }, { code = "b", name = "B" }]
[[top]]
code = "Y"
name = "Y"
children = [{ code = "c", name = "C" }, { code = "d", name = "D" }]
"#;

    fn tax() -> Taxonomy {
        Taxonomy::from_toml_str(THREE).unwrap()
    }

    /// truths/preds realizing confusion rows [[2,1,0],[0,3,0],[1,0,3]] over a, b, c
    fn hand_case() -> (Vec<&'static str>, Vec<&'static str>) {
        let truths = vec!["a", "a", "a", "b", "b", "b", "c", "c", "c", "c"];
        let preds = vec!["a", "a", "b", "b", "b", "b", "a", "c", "c", "c"];
        (preds, truths)
    }

    #[test]
    fn hand_three_class_case() {
        let (preds, truths) = hand_case();
        let r = evaluate(&preds, &truths, &tax(), Level::Second).unwrap();
        assert_eq!(r.confusion.counts[0][..3], [2, 1, 0]);
        assert_eq!(r.confusion.counts[1][..3], [0, 3, 0]);
        assert_eq!(r.confusion.counts[2][..3], [1, 0, 3]);
        assert_eq!(r.accuracy, 0.8);
        let m = &r.per_class;
        assert_eq!((m[0].precision, m[0].recall, m[0].f1), (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0));
        assert_eq!((m[1].precision, m[1].recall), (0.75, 1.0));
        assert_eq!((m[2].precision, m[2].recall), (1.0, 0.75));
        assert!((m[1].f1 - 6.0 / 7.0).abs() <= f64::EPSILON);
        assert!((m[2].f1 - 6.0 / 7.0).abs() <= f64::EPSILON);
        // class d never occurs in truths and is excluded from macro averages
        assert_eq!(m[3].support, 0);
        assert!((r.macro_precision - 29.0 / 36.0).abs() <= f64::EPSILON);
        assert!((r.macro_recall - 29.0 / 36.0).abs() <= f64::EPSILON);
        assert!((r.macro_f1 - 50.0 / 63.0).abs() <= f64::EPSILON);
        let per_class_mean = (m[0].f1 + m[1].f1 + m[2].f1) / 3.0;
        assert_eq!(r.macro_f1, per_class_mean);
        assert_eq!(r.misclassified.len(), 2);
    }

    #[test]
    fn perfect_predictions() {
        let labels = ["a", "c", "d", "d"];
        let r = evaluate(&labels, &labels, &tax(), Level::Second).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.misclassified.is_empty());
    }

    #[test]
    fn zero_predicted_positives_give_zero_precision() {
        let r = evaluate(&["a", "a"], &["a", "b"], &tax(), Level::Second).unwrap();
        let b = &r.per_class[1];
        assert_eq!((b.precision, b.recall, b.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn evaluate_errors() {
        assert!(matches!(
            evaluate(&["a"], &["a", "b"], &tax(), Level::Second),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            evaluate(&["X"], &["a"], &tax(), Level::Second),
            Err(Error::UnknownCode { .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let (preds, truths) = hand_case();
        let r = evaluate(&preds, &truths, &tax(), Level::Second).unwrap();
        let csv = r.confusion.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "true\\predicted,a,b,c,d");
        assert_eq!(lines[1], "a,2,1,0,0");
        assert_eq!(lines[3], "c,1,0,3,0");
    }

    #[test]
    fn consistency_hand_case() {
        // 4 sounds, 2 second-level errors, 1 recovered at top
        let truths = ["a", "b", "c", "d"];
        let second = ["a", "c", "d", "d"];
        let top = ["X", "Y", "Y", "Y"];
        let r = hierarchical_consistency(&second, &top, &truths, &tax()).unwrap();
        assert_eq!(r.second_errors, 2);
        assert_eq!(r.recovered_by_top, 1);
        assert_eq!(r.fraction, Some(0.5));
        assert_eq!(r.second_accuracy, 0.5);
        assert_eq!(r.collapsed_accuracy, 0.75);
    }

    #[test]
    fn consistency_without_errors_is_not_applicable() {
        let truths = ["a", "c"];
        let r = hierarchical_consistency(&truths, &["X", "Y"], &truths, &tax()).unwrap();
        assert_eq!(r.fraction, None);
        assert!(hierarchical_consistency(&truths, &["X"], &truths, &tax()).is_err());
    }

    fn report_with_errors(n: usize) -> EvaluationReport {
        let t = tax();
        let ids: Vec<String> = (0..n + 3).map(|i| format!("s{i}")).collect();
        let truths: Vec<&str> = (0..n + 3).map(|_| "a").collect();
        let preds: Vec<&str> = (0..n + 3).map(|i| if i < n { "b" } else { "a" }).collect();
        evaluate_with_ids(&ids, &preds, &truths, &t, Level::Second).unwrap()
    }

    #[test]
    fn export_all_and_sampled() {
        let report = report_with_errors(220);
        let all = export_misclassifications(&report, ReviewSample::All, None).unwrap();
        assert_eq!(all.len(), 220);
        let s1 = export_misclassifications(&report, ReviewSample::Random { n: 200, seed: 4 }, None).unwrap();
        let s2 = export_misclassifications(&report, ReviewSample::Random { n: 200, seed: 4 }, None).unwrap();
        assert_eq!(s1.len(), 200);
        assert_eq!(s1, s2);
        assert!(matches!(
            export_misclassifications(&report, ReviewSample::Random { n: 221, seed: 4 }, None),
            Err(Error::SampleTooLarge { .. })
        ));
        let perfect = report_with_errors(0);
        assert!(export_misclassifications(&perfect, ReviewSample::All, None).unwrap().is_empty());
    }

    #[test]
    fn export_attaches_audio_paths() {
        let report = report_with_errors(2);
        let mut rec = crate::dataset::SoundRecord::new("s1", "a", 1.0);
        rec.audio_path = Some("audio/s1.wav".into());
        let manifest = DatasetManifest::new(vec![rec], "t");
        let q = export_misclassifications(&report, ReviewSample::All, Some(&manifest)).unwrap();
        assert_eq!(q[0].audio_path, None);
        assert_eq!(q[1].audio_path.as_deref(), Some("audio/s1.wav"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.jsonl");
        write_queue(&path, &q).unwrap();
        assert_eq!(read_queue(&path).unwrap(), q);
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_total(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let codes = ["a", "b", "c", "d"];
            let truths: Vec<&str> = pairs.iter().map(|p| codes[p.0]).collect();
            let preds: Vec<&str> = pairs.iter().map(|p| codes[p.1]).collect();
            let r = evaluate(&preds, &truths, &tax(), Level::Second).unwrap();
            prop_assert_eq!(r.total as usize, pairs.len());
            prop_assert_eq!(r.accuracy, r.confusion.trace() as f64 / r.confusion.total() as f64);
            prop_assert_eq!(r.misclassified.len() as u64, r.total - r.confusion.trace());
        }

        #[test]
        fn collapsed_accuracy_dominates(pairs in proptest::collection::vec((0usize..4, 0usize..4, 0usize..2), 1..100)) {
            let codes = ["a", "b", "c", "d"];
            let tops = ["X", "Y"];
            let truths: Vec<&str> = pairs.iter().map(|p| codes[p.0]).collect();
            let second: Vec<&str> = pairs.iter().map(|p| codes[p.1]).collect();
            let top: Vec<&str> = pairs.iter().map(|p| tops[p.2]).collect();
            let r = hierarchical_consistency(&second, &top, &truths, &tax()).unwrap();
            prop_assert!(r.collapsed_accuracy >= r.second_accuracy);
        }
    }
}
