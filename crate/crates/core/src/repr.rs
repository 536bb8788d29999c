//! Fixed-length sound representations from per-sound feature matrices.
//!
//! * `fssimrep`: 846-d acoustic descriptor vector → min-max scale to [0, 1] → PCA to 100-d
//! * `vggish`: `(n, 128)` frame embeddings → temporal mean
//! * `fsdsinet`: `(n, 512)` frame embeddings → temporal mean
//! * `clap`: one 512-d clip embedding, passed through
//!
//! Scaler and PCA are fitted on training sounds only.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvec::FeatureMatrix;

pub const FSSIMREP_PCA_DIMS: usize = 100;

/// Eigenvalues at or below this fraction of the largest are treated as zero.
pub const DEGENERACY_RTOL: f64 = 1e-10;

/// Column-wise mean over frames.
pub fn aggregate_mean(m: &FeatureMatrix) -> FeatureMatrix {
    let n = m.frames();
    let mut sums = vec![0.0f64; m.dims()];
    for row in m.rows() {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let values = sums.into_iter().map(|s| (s / n as f64) as f32).collect();
    FeatureMatrix::new(m.sound_id.clone(), 1, m.dims(), values)
        .expect("mean of finite values is finite")
}

/// Per-dimension min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerModel {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerModel {
    pub fn fit<R: AsRef<[f32]>>(rows: &[R]) -> Result<ScalerModel> {
        let first = rows.first().ok_or(Error::Empty("scaler training set"))?.as_ref();
        let d = first.len();
        let mut min: Vec<f64> = first.iter().map(|&v| v as f64).collect();
        let mut max = min.clone();
        for row in &rows[1..] {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
                let v = v as f64;
                if v < *lo {
                    *lo = v;
                }
                if v > *hi {
                    *hi = v;
                }
            }
        }
        Ok(ScalerModel { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Scales, clamps to `[0, 1]`; constant dimensions map to 0.
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f64>> {
        if v.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: v.len(),
            });
        }
        Ok(v.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| {
                let range = hi - lo;
                if range > 0.0 {
                    ((x as f64 - lo) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// Fits a scaler on clip-level (single-frame) matrices.
pub fn fit_scaler(train: &[FeatureMatrix]) -> Result<ScalerModel> {
    let rows = train
        .iter()
        .map(|m| {
            if m.frames() == 1 {
                Ok(m.values())
            } else {
                Err(Error::InvalidParameter(format!(
                    "scaler expects clip-level vectors, `{}` has {} frames",
                    m.sound_id,
                    m.frames()
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ScalerModel::fit(&rows)
}

/// Covariance PCA (no whitening).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` rows of length `d`, orthonormal, in decreasing-variance order.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Trace of the training covariance.
    pub total_variance: f64,
}

impl PcaModel {
    /// Fits the top-`k` principal axes of the sample covariance (N − 1 denominator).
    ///
    /// The eigenproblem is solved on whichever of the `d × d` covariance or the
    /// `N × N` Gram matrix is smaller. Each component's largest-magnitude entry
    /// is made positive. Fewer than `k` non-degenerate directions is an error.
    pub fn fit<R: AsRef<[f64]>>(train: &[R], k: usize) -> Result<PcaModel> {
        let n = train.len();
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "PCA needs at least 2 training vectors, got {n}"
            )));
        }
        let d = train[0].as_ref().len();
        if d == 0 {
            return Err(Error::Empty("PCA input dimensionality"));
        }
        if k == 0 || k > d.min(n) {
            return Err(Error::InvalidParameter(format!(
                "PCA target dims {k} must be in 1..={}",
                d.min(n)
            )));
        }
        let mut mean = vec![0.0; d];
        for row in train {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("PCA training data".into()));
            }
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let centered = DMatrix::from_fn(n, d, |i, j| train[i].as_ref()[j] - mean[j]);
        let denom = (n - 1) as f64;

        let use_gram = n < d;
        let scatter = if use_gram {
            &centered * centered.transpose()
        } else {
            centered.transpose() * &centered
        } / denom;
        let total_variance = scatter.trace();
        let eig = SymmetricEigen::new(scatter);

        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let largest = eig.eigenvalues[order[0]].max(0.0);
        let tol = largest * DEGENERACY_RTOL;
        let available = order
            .iter()
            .take_while(|&&i| eig.eigenvalues[i] > tol && largest > 0.0)
            .count();
        if available < k {
            return Err(Error::DegenerateCovariance {
                requested: k,
                available,
            });
        }

        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &idx in order.iter().take(k) {
            let lambda = eig.eigenvalues[idx];
            let vector = eig.eigenvectors.column(idx);
            let mut axis: Vec<f64> = if use_gram {
                let v = centered.transpose() * vector;
                let norm = v.norm();
                v.iter().map(|x| x / norm).collect()
            } else {
                vector.iter().copied().collect()
            };
            fix_sign(&mut axis);
            components.push(axis);
            explained_variance.push(lambda.max(0.0));
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variance,
            total_variance,
        })
    }

    pub fn input_dims(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dims(&self) -> usize {
        self.components.len()
    }

    /// `components · (v − mean)`
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dims() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dims(),
                found: v.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(v.iter().zip(&self.mean))
                    .map(|(&w, (&x, &m))| w * (x - m))
                    .sum()
            })
            .collect())
    }

    /// `mean + componentsᵀ · y`
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.output_dims() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dims(),
                found: y.len(),
            });
        }
        let mut out = self.mean.clone();
        for (c, &coef) in self.components.iter().zip(y) {
            for (o, &w) in out.iter_mut().zip(c) {
                *o += coef * w;
            }
        }
        Ok(out)
    }
}

fn fix_sign(axis: &mut [f64]) {
    let mut pivot = 0;
    for (i, v) in axis.iter().enumerate() {
        if v.abs() > axis[pivot].abs() {
            pivot = i;
        }
    }
    if axis[pivot] < 0.0 {
        for v in axis.iter_mut() {
            *v = -*v;
        }
    }
}

pub fn fit_pca<R: AsRef<[f64]>>(train: &[R], k: usize) -> Result<PcaModel> {
    PcaModel::fit(train, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReprKind {
    Fssimrep,
    Vggish,
    Fsdsinet,
    Clap,
}

impl ReprKind {
    pub const ALL: [ReprKind; 4] = [ReprKind::Fssimrep, ReprKind::Vggish, ReprKind::Fsdsinet, ReprKind::Clap];

    pub fn as_str(self) -> &'static str {
        match self {
            ReprKind::Fssimrep => "fssimrep",
            ReprKind::Vggish => "vggish",
            ReprKind::Fsdsinet => "fsdsinet",
            ReprKind::Clap => "clap",
        }
    }

    /// Expected feature dimensionality per frame.
    pub fn input_dims(self) -> usize {
        match self {
            ReprKind::Fssimrep => 846,
            ReprKind::Vggish => 128,
            ReprKind::Fsdsinet | ReprKind::Clap => 512,
        }
    }

    pub fn is_frame_level(self) -> bool {
        matches!(self, ReprKind::Vggish | ReprKind::Fsdsinet)
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReprKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown representation `{s}`")))
    }
}

/// Fitted models for one representation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprPipeline {
    pub kind: ReprKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<ScalerModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaModel>,
}

impl ReprPipeline {
    /// A pipeline with nothing to fit (`vggish`, `fsdsinet`, `clap`).
    pub fn unfitted(kind: ReprKind) -> Self {
        ReprPipeline {
            kind,
            scaler: None,
            pca: None,
        }
    }

    /// Fits the models `kind` needs on training matrices.
    pub fn fit(kind: ReprKind, train: &[FeatureMatrix], pca_dims: usize) -> Result<ReprPipeline> {
        if kind != ReprKind::Fssimrep {
            return Ok(ReprPipeline::unfitted(kind));
        }
        for m in train {
            check_input(kind, m)?;
        }
        let scaler = fit_scaler(train)?;
        let scaled = train
            .iter()
            .map(|m| scaler.apply(m.values()))
            .collect::<Result<Vec<_>>>()?;
        let pca = PcaModel::fit(&scaled, pca_dims)?;
        Ok(ReprPipeline {
            kind,
            scaler: Some(scaler),
            pca: Some(pca),
        })
    }

    pub fn output_dims(&self) -> Option<usize> {
        match self.kind {
            ReprKind::Fssimrep => self.pca.as_ref().map(PcaModel::output_dims),
            other => Some(other.input_dims()),
        }
    }

    pub fn build(&self, m: &FeatureMatrix) -> Result<Vec<f32>> {
        build_representation(self.kind, m, self)
    }
}

fn check_input(kind: ReprKind, m: &FeatureMatrix) -> Result<()> {
    if m.dims() != kind.input_dims() {
        return Err(Error::DimensionMismatch {
            expected: kind.input_dims(),
            found: m.dims(),
        });
    }
    if !kind.is_frame_level() && m.frames() != 1 {
        return Err(Error::InvalidParameter(format!(
            "{kind} expects one clip-level frame, `{}` has {}",
            m.sound_id,
            m.frames()
        )));
    }
    Ok(())
}

/// Produces the fixed-length vector for one sound.
pub fn build_representation(kind: ReprKind, m: &FeatureMatrix, fitted: &ReprPipeline) -> Result<Vec<f32>> {
    check_input(kind, m)?;
    match kind {
        ReprKind::Clap => Ok(m.values().to_vec()),
        ReprKind::Vggish | ReprKind::Fsdsinet => Ok(aggregate_mean(m).into_values()),
        ReprKind::Fssimrep => {
            let scaler = fitted.scaler.as_ref().ok_or(Error::MissingModel("scaler"))?;
            let pca = fitted.pca.as_ref().ok_or(Error::MissingModel("pca"))?;
            let scaled = scaler.apply(m.values())?;
            Ok(pca.apply(&scaled)?.into_iter().map(|v| v as f32).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
        let values = (0..n * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        FeatureMatrix::new("s", n, d, values).unwrap()
    }

    #[test]
    fn mean_of_single_frame_is_identity() {
        let m = FeatureMatrix::new("a", 1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(aggregate_mean(&m), m);
    }

    #[test]
    fn mean_by_hand() {
        let m = FeatureMatrix::new("a", 2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(aggregate_mean(&m).values(), &[1.0, 1.0]);
    }

    #[test]
    fn mean_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 7, 128);
        let got = aggregate_mean(&m);
        for j in 0..128 {
            let mut acc = 0.0f64;
            let mut i = 0;
            while i < 7 {
                acc += m.values()[i * 128 + j] as f64;
                i += 1;
            }
            let oracle = (acc / 7.0) as f32;
            assert!((got.values()[j] as f64 - oracle as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn scaler_extrema_by_inspection() {
        let s = ScalerModel::fit(&[vec![0.0f32, 10.0], vec![5.0, 20.0]]).unwrap();
        assert_eq!(s.min, vec![0.0, 10.0]);
        assert_eq!(s.max, vec![5.0, 20.0]);
        let single = ScalerModel::fit(&[vec![1.0f32, 2.0]]).unwrap();
        assert_eq!(single.min, single.max);
        assert!(ScalerModel::fit::<Vec<f32>>(&[]).is_err());
        assert!(ScalerModel::fit(&[vec![1.0f32], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn scaler_apply_bounds_and_clamping() {
        let s = ScalerModel::fit(&[vec![0.0f32, 10.0, 3.0], vec![5.0, 20.0, 3.0]]).unwrap();
        assert_eq!(s.apply(&[0.0, 10.0, 3.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(s.apply(&[5.0, 20.0, 3.0]).unwrap(), vec![1.0, 1.0, 0.0]);
        assert_eq!(s.apply(&[-1.0, 15.0, 99.0]).unwrap(), vec![0.0, 0.5, 0.0]);
        assert_eq!(s.apply(&[7.0, 25.0, 3.0]).unwrap(), vec![1.0, 1.0, 0.0]);
        assert!(s.apply(&[1.0]).is_err());
    }

    #[test]
    fn scaler_on_846_dims_matches_streaming_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f32>> = (0..300)
            .map(|_| (0..846).map(|_| rng.random_range(-50.0f32..50.0)).collect())
            .collect();
        let s = ScalerModel::fit(&rows).unwrap();
        for j in 0..846 {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for r in &rows {
                lo = lo.min(r[j]);
                hi = hi.max(r[j]);
            }
            assert_eq!(s.min[j], lo as f64);
            assert_eq!(s.max[j], hi as f64);
        }
    }

    #[test]
    fn pca_rank_one_line() {
        let train: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = PcaModel::fit(&train, 1).unwrap();
        assert!(p.explained_variance[0] / p.total_variance >= 0.99999);
        let axis = &p.components[0];
        let expected = [1.0 / 5f64.sqrt(), 2.0 / 5f64.sqrt()];
        assert!((axis[0] - expected[0]).abs() < 1e-12 && (axis[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn pca_mean_maps_to_zero_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = PcaModel::fit(&train, 4).unwrap();
        assert!(p.apply(&p.mean).unwrap().iter().all(|v| v.abs() < 1e-15));
        let v = &train[3];
        let shift: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        let shifted: Vec<f64> = v.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let shift_from_mean: Vec<f64> = p.mean.iter().zip(&shift).map(|(m, s)| m + s).collect();
        let lhs = p.apply(&shifted).unwrap();
        let base = p.apply(v).unwrap();
        let delta = p.apply(&shift_from_mean).unwrap();
        for i in 0..4 {
            assert!((lhs[i] - base[i] - delta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_full_rank_round_trip_and_variance_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 12;
        let train: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64).collect())
            .collect();
        let p = PcaModel::fit(&train, d).unwrap();
        let sum: f64 = p.explained_variance.iter().sum();
        assert!((sum - p.total_variance).abs() / p.total_variance <= 1e-8);
        for w in p.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for v in &train {
            let back = p.reconstruct(&p.apply(v).unwrap()).unwrap();
            for (a, b) in back.iter().zip(v) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn pca_gram_route_agrees_with_covariance_route() {
        // n < d takes the Gram path; appending zero-variance copies forces n >= d
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 30;
        let train: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let gram = PcaModel::fit(&train, 5).unwrap();
        let mut cov_input = train.clone();
        cov_input.extend(train.iter().cloned());
        cov_input.extend(train.iter().cloned());
        let cov = PcaModel::fit(&cov_input, 5).unwrap();
        for (a, b) in gram.components.iter().zip(&cov.components) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-8);
            }
        }
        // doubling the sample count changes only the covariance scale: (n-1) vs (3n-1)
        let ratio = (3.0 * 10.0 - 1.0) / (3.0 * (10.0 - 1.0));
        for (a, b) in gram.explained_variance.iter().zip(&cov.explained_variance) {
            assert!((a - b * ratio).abs() / a < 1e-9);
        }
    }

    #[test]
    fn pca_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = PcaModel::fit(&train, 3).unwrap();
        for c in &p.components {
            let pivot = c.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn pca_errors() {
        let one = vec![vec![1.0, 2.0]];
        assert!(PcaModel::fit(&one, 1).is_err());
        let two = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert!(matches!(PcaModel::fit(&two, 3), Err(Error::InvalidParameter(_))));
        let same = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(
            PcaModel::fit(&same, 1),
            Err(Error::DegenerateCovariance { requested: 1, available: 0 })
        ));
        let line: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
        assert!(matches!(
            PcaModel::fit(&line, 2),
            Err(Error::DegenerateCovariance { requested: 2, available: 1 })
        ));
        let p = PcaModel::fit(&line, 1).unwrap();
        assert!(p.apply(&[1.0]).is_err());
    }

    #[test]
    fn representation_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vggish = random_matrix(&mut rng, 10, 128);
        let out = build_representation(ReprKind::Vggish, &vggish, &ReprPipeline::unfitted(ReprKind::Vggish)).unwrap();
        assert_eq!(out.len(), 128);

        let sinet = random_matrix(&mut rng, 4, 512);
        assert_eq!(ReprPipeline::unfitted(ReprKind::Fsdsinet).build(&sinet).unwrap().len(), 512);

        let clap = random_matrix(&mut rng, 1, 512);
        let out = ReprPipeline::unfitted(ReprKind::Clap).build(&clap).unwrap();
        assert_eq!(out, clap.values());

        let train: Vec<FeatureMatrix> = (0..130).map(|_| random_matrix(&mut rng, 1, 846)).collect();
        let pipeline = ReprPipeline::fit(ReprKind::Fssimrep, &train, FSSIMREP_PCA_DIMS).unwrap();
        let probe = random_matrix(&mut rng, 1, 846);
        assert_eq!(pipeline.build(&probe).unwrap().len(), 100);
        assert_eq!(pipeline.output_dims(), Some(100));
    }

    #[test]
    fn representation_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wrong = random_matrix(&mut rng, 3, 100);
        assert!(matches!(
            ReprPipeline::unfitted(ReprKind::Vggish).build(&wrong),
            Err(Error::DimensionMismatch { expected: 128, found: 100 })
        ));
        let multi = random_matrix(&mut rng, 2, 512);
        assert!(ReprPipeline::unfitted(ReprKind::Clap).build(&multi).is_err());
        let fss = random_matrix(&mut rng, 1, 846);
        assert!(matches!(
            ReprPipeline::unfitted(ReprKind::Fssimrep).build(&fss),
            Err(Error::MissingModel(_))
        ));
    }
}
