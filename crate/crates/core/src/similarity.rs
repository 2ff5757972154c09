//! Initial and imputed similarity kernels, reliability bands and spectrum
//! diagnostics.
//!
//! Similarity matrices are persisted as the magic bytes `CBS1`, one
//! little-endian `u64` (`n`) and the row-major little-endian `f64` payload.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::dataset::{self, FeatureMatrix};
use crate::error::{Error, Result};

const SIMILARITY_MAGIC: &[u8; 4] = b"CBS1";
const SYMMETRY_TOL: f64 = 1e-9;
const EIGEN_FLOOR: f64 = 1e-10;
const EIGEN_MAX_ITER: usize = 10_000;

pub const DEFAULT_SHRINKAGE: f64 = 0.1;
pub const DEFAULT_LOWER_Q: f64 = 0.05;
pub const DEFAULT_UPPER_Q: f64 = 0.95;

/// Symmetric `n × n` matrix of pairwise similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: DMatrix<f64>,
}

impl SimilarityMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n == 0 || values.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "similarity must be square and non-empty, got {}x{}",
                n,
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("similarity has non-finite entries".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::Format(format!("similarity not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.values.len());
        out.extend_from_slice(SIMILARITY_MAGIC);
        out.extend_from_slice(&(self.n() as u64).to_le_bytes());
        dataset::write_matrix_payload(&mut out, &self.values);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = bytes;
        dataset::expect_magic(&mut reader, SIMILARITY_MAGIC)?;
        let n = dataset::read_u64(&mut reader)? as usize;
        let values = dataset::read_matrix_payload(&mut reader, n, n)?;
        if !reader.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", reader.len())));
        }
        Self::new(values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn symmetric_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, f64::EPSILON, EIGEN_MAX_ITER).ok_or(Error::EigenFailure)
}

/// Whitening with the shrunk shared covariance
/// `Σ_sh = (1 − shrinkage)·Σ + shrinkage·tr(Σ)/dim·I`; returns
/// `Σ_sh^(−1/2)(d_i − μ)` for every sample.
pub fn whiten(features: &FeatureMatrix, shrinkage: f64) -> Result<FeatureMatrix> {
    let n = features.n_samples();
    let dim = features.dim();
    if n < 2 {
        return Err(Error::InvalidParams("whitening needs at least two samples".into()));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidParams(format!("shrinkage {shrinkage} not in [0, 1]")));
    }
    let x = features.values();
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let iso = cov.trace() / dim as f64;
    let mut shrunk = cov * (1.0 - shrinkage);
    for k in 0..dim {
        shrunk[(k, k)] += shrinkage * iso;
    }
    let shrunk = (&shrunk + shrunk.transpose()) * 0.5;

    let eig = symmetric_eigen(shrunk)?;
    if eig.eigenvalues.iter().all(|&l| l <= EIGEN_FLOOR) {
        return Err(Error::DegenerateCovariance);
    }
    let inv_sqrt = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR).sqrt().recip());
    let v = &eig.eigenvectors;
    let transform = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
    // rows are samples, and the transform is symmetric
    FeatureMatrix::new(centered * transform)
}

fn mirrored_kernel<F>(rows: &DMatrix<f64>, entry: F) -> DMatrix<f64>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let n = rows.ncols();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| entry(i, j)).collect())
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for (i, row) in upper.into_iter().enumerate() {
        for (offset, v) in row.into_iter().enumerate() {
            let j = i + offset;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Inner-product kernel `s_ij = φ_iᵀ φ_j`, exactly symmetric.
pub fn similarity_kernel(phi: &FeatureMatrix) -> SimilarityMatrix {
    // columns of the transpose are contiguous samples
    let t = phi.values().transpose();
    let values = mirrored_kernel(&t, |i, j| t.column(i).dot(&t.column(j)));
    SimilarityMatrix { values }
}

/// Pearson correlation between rows, with unit diagonal.
pub fn correlation_kernel(embeddings: &FeatureMatrix) -> Result<SimilarityMatrix> {
    let mut t = embeddings.values().transpose();
    for (i, mut col) in t.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVarianceRow(i));
        }
        col /= norm;
    }
    let values = mirrored_kernel(&t, |i, j| {
        if i == j {
            1.0
        } else {
            t.column(i).dot(&t.column(j)).clamp(-1.0, 1.0)
        }
    });
    Ok(SimilarityMatrix { values })
}

/// Per-row cut points separating the trustworthy tails of the similarity
/// distribution from its unreliable middle.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBands {
    pub lower_q: f64,
    pub upper_q: f64,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ReliabilityBands {
    /// `s_ij ≥ high[i]`.
    pub fn similar_from(&self, i: usize, s_ij: f64) -> bool {
        s_ij >= self.high[i]
    }

    /// `s_ij ≤ low[i]`.
    pub fn dissimilar_from(&self, i: usize, s_ij: f64) -> bool {
        s_ij <= self.low[i]
    }

    /// Unordered pair: reliably similar from the viewpoint of either endpoint.
    pub fn pair_similar(&self, s: &SimilarityMatrix, i: usize, j: usize) -> bool {
        let v = s.get(i, j);
        self.similar_from(i, v) || self.similar_from(j, v)
    }

    /// Unordered pair: reliably dissimilar from the viewpoint of either endpoint.
    pub fn pair_dissimilar(&self, s: &SimilarityMatrix, i: usize, j: usize) -> bool {
        let v = s.get(i, j);
        self.dissimilar_from(i, v) || self.dissimilar_from(j, v)
    }
}

/// Quantile of sorted data by linear interpolation between order statistics
/// (position `(m − 1)·q`).
pub fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-row interpolated quantiles of the off-diagonal entries, one entry per
/// requested level. A lone sample gets `−∞` below the median and `+∞` above.
pub fn row_quantiles(s: &SimilarityMatrix, levels: &[f64]) -> Vec<Vec<f64>> {
    let n = s.n();
    let mut out = vec![Vec::with_capacity(n); levels.len()];
    let mut row = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| s.get(i, j)));
        row.sort_by(f64::total_cmp);
        for (cuts, &q) in out.iter_mut().zip(levels) {
            cuts.push(if !row.is_empty() {
                interpolated_quantile(&row, q)
            } else if q < 0.5 {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            });
        }
    }
    out
}

pub fn reliability_bands(s: &SimilarityMatrix, lower_q: f64, upper_q: f64) -> Result<ReliabilityBands> {
    if !(0.0 < lower_q && lower_q < upper_q && upper_q < 1.0) {
        return Err(Error::InvalidParams(format!(
            "quantiles must satisfy 0 < {lower_q} < {upper_q} < 1"
        )));
    }
    let [low, high]: [Vec<f64>; 2] = row_quantiles(s, &[lower_q, upper_q])
        .try_into()
        .expect("two levels");
    Ok(ReliabilityBands {
        lower_q,
        upper_q,
        low,
        high,
    })
}

/// Normalized cumulative spectrum: eigenvalue magnitudes sorted descending,
/// entry `k` is the share of total magnitude held by the top `k + 1`.
pub fn spectrum_cumulative(s: &SimilarityMatrix) -> Result<Vec<f64>> {
    let eig = symmetric_eigen(s.values().clone())?;
    let mut mags: Vec<f64> = eig.eigenvalues.iter().map(|l| l.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = mags
        .iter()
        .map(|m| {
            acc += m;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Ok(out)
}

/// Number of leading eigenvalues needed to reach `mass` of the spectrum.
pub fn eigen_count_for_mass(cumulative: &[f64], mass: f64) -> usize {
    cumulative
        .iter()
        .position(|&c| c >= mass)
        .map_or(cumulative.len(), |k| k + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = crate::rng::seeded(seed);
        FeatureMatrix::new(DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    fn sample_cov(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let d = m.ncols();
        let mean: Vec<f64> = (0..d).map(|j| m.column(j).sum() / n as f64).collect();
        DMatrix::from_fn(d, d, |a, b| {
            (0..n).map(|i| (m[(i, a)] - mean[a]) * (m[(i, b)] - mean[b])).sum::<f64>() / (n as f64 - 1.0)
        })
    }

    fn sim(rows: &[&[f64]]) -> SimilarityMatrix {
        let n = rows.len();
        SimilarityMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn whiten_with_identity_covariance_only_centers() {
        // rows ±e_k·sqrt(n-1)/sqrt(2) give sample covariance I and mean 0; shift by mu
        let d = 3;
        let scale = (5.0f64 / 2.0).sqrt();
        let mut rows = Vec::new();
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut r = vec![1.0, -2.0, 0.5];
                r[k] += sign * scale;
                rows.push(r);
            }
        }
        let m = FeatureMatrix::from_rows(&rows).unwrap();
        let cov = sample_cov(m.values());
        assert!((cov - DMatrix::identity(3, 3)).abs().max() < 1e-12);
        let w = whiten(&m, 0.0).unwrap();
        for (i, r) in rows.iter().enumerate() {
            for j in 0..d {
                let expected = r[j] - [1.0, -2.0, 0.5][j];
                assert!((w.values()[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_shrinkage_is_isotropic_rescale() {
        let m = random_features(30, 4, 1);
        let cov = sample_cov(m.values());
        let factor = (4.0 / cov.trace()).sqrt();
        let w = whiten(&m, 1.0).unwrap();
        let mean = m.values().row_mean();
        for i in 0..30 {
            for j in 0..4 {
                let expected = (m.values()[(i, j)] - mean[j]) * factor;
                assert!((w.values()[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let mut rng = crate::rng::seeded(2);
        let raw = random_features(100, 4, 3);
        // correlate the columns first
        let mix = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { rng.random_range(-0.5..0.5) });
        let m = FeatureMatrix::new(raw.values() * mix).unwrap();
        let w = whiten(&m, 0.0).unwrap();
        let cov = sample_cov(w.values());
        assert!((cov - DMatrix::identity(4, 4)).abs().max() < 1e-8);
    }

    #[test]
    fn whiten_errors() {
        let one = FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(whiten(&one, 0.1), Err(Error::InvalidParams(_))));
        let constant = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(whiten(&constant, 0.1), Err(Error::DegenerateCovariance)));
    }

    #[test]
    fn kernel_of_orthonormal_rows_is_identity() {
        let m = FeatureMatrix::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(similarity_kernel(&m).values(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn kernel_self_dot_and_triple_loop_oracle() {
        let m = random_features(5, 3, 4);
        let k = similarity_kernel(&m);
        let v = m.values();
        for i in 0..5 {
            for j in 0..5 {
                let mut oracle = 0.0;
                for l in 0..3 {
                    oracle += v[(i, l)] * v[(j, l)];
                }
                assert!((k.get(i, j) - oracle).abs() < 1e-12);
                assert_eq!(k.get(i, j), k.get(j, i));
            }
        }
        let dup = FeatureMatrix::from_rows(&[vec![1.0, 2.0, 2.0], vec![1.0, 2.0, 2.0]]).unwrap();
        assert_eq!(similarity_kernel(&dup).get(0, 1), 9.0);
    }

    #[test]
    fn correlation_examples() {
        let m = FeatureMatrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0],
            vec![-1.0, -2.0, -3.0],
            vec![1.0, 2.0, 4.0],
        ])
        .unwrap();
        let c = correlation_kernel(&m).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((c.get(0, 2) + 1.0).abs() < 1e-15);
        // centered (-1,0,1)·(-4/3,-1/3,5/3) = 3, norms² 2 and 14/3: r = sqrt(27/28)
        assert!((c.get(0, 3) - (27.0f64 / 28.0).sqrt()).abs() < 1e-14);
        assert_eq!(c.get(3, 3), 1.0);
    }

    #[test]
    fn correlation_zero_variance_row() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 3.0]]).unwrap();
        assert!(matches!(correlation_kernel(&m), Err(Error::ZeroVarianceRow(1))));
    }

    #[test]
    fn band_interpolation() {
        let n = 11;
        // row 0 off-diagonal values are 0..=9
        let s = SimilarityMatrix::new(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                100.0
            } else if i == 0 || j == 0 {
                (i.max(j) - 1) as f64
            } else {
                0.0
            }
        }))
        .unwrap();
        let b = reliability_bands(&s, 0.1, 0.9).unwrap();
        assert!((b.high[0] - 8.1).abs() < 1e-12);
        assert!((b.low[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn band_constant_row_marks_every_pair_both_ways() {
        let s = sim(&[&[1.0, 0.3, 0.3], &[0.3, 1.0, 0.3], &[0.3, 0.3, 1.0]]);
        let b = reliability_bands(&s, 0.05, 0.95).unwrap();
        assert_eq!(b.low[0], b.high[0]);
        assert!(b.similar_from(0, 0.3) && b.dissimilar_from(0, 0.3));
    }

    #[test]
    fn band_quantile_validation() {
        let s = sim(&[&[1.0]]);
        assert!(reliability_bands(&s, 0.6, 0.4).is_err());
        assert!(reliability_bands(&s, 0.0, 0.4).is_err());
        let b = reliability_bands(&s, 0.05, 0.95).unwrap();
        assert!(!b.similar_from(0, 1e300));
    }

    #[test]
    fn band_tail_fraction_monte_carlo() {
        let mut rng = crate::rng::seeded(11);
        let n = 10_001;
        let row: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut sorted = row[1..].to_vec();
        sorted.sort_by(f64::total_cmp);
        let low = interpolated_quantile(&sorted, 0.05);
        let high = interpolated_quantile(&sorted, 0.95);
        let reliable = row[1..].iter().filter(|&&v| v <= low || v >= high).count();
        let frac = reliable as f64 / (n - 1) as f64;
        assert!((frac - 0.10).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn spectrum_examples() {
        let eye = SimilarityMatrix::new(DMatrix::identity(4, 4)).unwrap();
        let c = spectrum_cumulative(&eye).unwrap();
        for (a, b) in c.iter().zip([0.25, 0.5, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let d = SimilarityMatrix::new(DMatrix::from_diagonal(&nalgebra::dvector![3.0, 1.0])).unwrap();
        let c = spectrum_cumulative(&d).unwrap();
        assert!((c[0] - 0.75).abs() < 1e-12 && c[1] == 1.0);
        let v = nalgebra::dvector![1.0, 2.0, -1.0];
        let r1 = SimilarityMatrix::new(&v * v.transpose()).unwrap();
        let c = spectrum_cumulative(&r1).unwrap();
        assert!(c.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert_eq!(eigen_count_for_mass(&c, 0.9), 1);
        let z = SimilarityMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(spectrum_cumulative(&z), Err(Error::ZeroMatrix)));
    }

    #[test]
    fn similarity_binary_roundtrip() {
        let s = similarity_kernel(&random_features(6, 2, 9));
        let back = SimilarityMatrix::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert!(SimilarityMatrix::from_bytes(b"CBS1").is_err());
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(SimilarityMatrix::new(m).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn permuted(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
            DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)])
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn kernel_commutes_with_permutation(seed in 0u64..1000, n in 2usize..8) {
                let m = random_features(n, 3, seed);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.rotate_left((seed as usize) % n);
                let k = similarity_kernel(&m);
                let kp = similarity_kernel(&FeatureMatrix::new(permuted(m.values(), &perm)).unwrap());
                for i in 0..n {
                    for j in 0..n {
                        prop_assert!((kp.get(i, j) - k.get(perm[i], perm[j])).abs() < 1e-10);
                    }
                }
            }

            #[test]
            fn whitened_kernel_is_linear_invariant(seed in 0u64..1000) {
                let m = random_features(40, 4, seed);
                let mut rng = crate::rng::seeded(seed + 1);
                // well-conditioned random transform: I + small perturbation, then rescale columns
                let a = DMatrix::from_fn(4, 4, |i, j| {
                    (if i == j { 1.0 } else { 0.0 }) + rng.random_range(-0.3..0.3)
                }) * DMatrix::from_diagonal(&nalgebra::dvector![1.0, 3.0, 0.2, 5.0]);
                let sv = a.clone().svd(false, false).singular_values;
                prop_assume!(sv.max() / sv.min() <= 100.0);
                let base = similarity_kernel(&whiten(&m, 0.0).unwrap());
                let moved = FeatureMatrix::new(m.values() * a).unwrap();
                let other = similarity_kernel(&whiten(&moved, 0.0).unwrap());
                prop_assert!((base.values() - other.values()).abs().max() < 1e-8);
            }

            #[test]
            fn spectrum_is_monotone(seed in 0u64..1000, n in 1usize..10) {
                let m = random_features(n, 3, seed);
                let s = similarity_kernel(&m);
                let c = spectrum_cumulative(&s).unwrap();
                prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(*c.last().unwrap(), 1.0);
            }

            #[test]
            fn correlation_is_bounded(seed in 0u64..1000) {
                let c = correlation_kernel(&random_features(8, 5, seed)).unwrap();
                prop_assert!(c.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }
}
