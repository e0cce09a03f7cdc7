//! Global alignment kernel (GAK), its bandwidth heuristic, Gram matrices and
//! the distance induced by a kernel.
//!
//! The local kernel between rows `a` and `b` is
//!
//! ```text
//! κ(a, b) = exp(-φ(a, b)),  φ(a, b) = ‖a − b‖² / (2σ²) + ln(2 − exp(−‖a − b‖² / (2σ²)))
//! ```
//!
//! and the GAK value sums `∏ κ` over every monotone alignment path. The
//! recurrence runs entirely on logarithms, so nothing under- or overflows
//! regardless of series length.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{EmaDataset, SeriesView};
use crate::distance::{
    pairwise_symmetric, read_square_csv, squared_euclidean, write_square_csv, DistanceMatrix, MetricTag,
};
use crate::error::{Error, Result};

/// Relative tolerance for the smallest eigenvalue of a Gram matrix.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Radicands of kernel-induced distances above `-NEGATIVE_RADICAND_TOLERANCE`
/// are clamped to zero.
pub const NEGATIVE_RADICAND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GakConfig {
    /// Fixed bandwidth. `None` estimates it with [`estimate_sigma`].
    pub sigma: Option<f64>,
    /// Factor applied to the estimated bandwidth.
    pub sigma_multiplier: f64,
    /// Cosine-normalize the Gram matrix to a unit diagonal.
    pub normalize: bool,
    /// Optional Sakoe-Chiba band, as in [`crate::distance::DtwConfig`].
    pub band_radius: Option<usize>,
}

impl Default for GakConfig {
    fn default() -> Self {
        GakConfig {
            sigma: None,
            sigma_multiplier: 1.0,
            normalize: true,
            band_radius: None,
        }
    }
}

impl GakConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        GakConfig {
            sigma: Some(sigma),
            ..Default::default()
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")))
    }
}

/// `ln κ(a, b)` for the half-Gaussian local kernel.
#[inline]
pub fn log_local_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let z = squared_euclidean(a, b) / (2.0 * sigma * sigma);
    -(z + (2.0 - (-z).exp()).ln())
}

#[inline]
fn log_sum_exp3(a: f64, b: f64, c: f64) -> f64 {
    let hi = a.max(b).max(c);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + ((a - hi).exp() + (b - hi).exp() + (c - hi).exp()).ln()
}

fn check_pair(x: &SeriesView<'_>, y: &SeriesView<'_>, band: Option<usize>) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySeries);
    }
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            left: x.dim(),
            right: y.dim(),
        });
    }
    if x.has_missing() || y.has_missing() {
        return Err(Error::MissingValues);
    }
    if let Some(radius) = band {
        let diff = x.len().abs_diff(y.len());
        if radius < diff {
            return Err(Error::BandTooNarrow { radius, diff });
        }
    }
    Ok(())
}

/// Logarithm of the global alignment kernel, optionally restricted to a band.
pub fn log_gak_banded(
    x: SeriesView<'_>,
    y: SeriesView<'_>,
    sigma: f64,
    band_radius: Option<usize>,
) -> Result<f64> {
    check_sigma(sigma)?;
    check_pair(&x, &y, band_radius)?;
    let (n, m) = (x.len(), y.len());
    let mut prev = vec![f64::NEG_INFINITY; m + 1];
    let mut curr = vec![f64::NEG_INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr.fill(f64::NEG_INFINITY);
        let xi = x.row(i - 1);
        for j in 1..=m {
            if band_radius.is_some_and(|r| (i - 1).abs_diff(j - 1) > r) {
                continue;
            }
            curr[j] = log_local_kernel(xi, y.row(j - 1), sigma)
                + log_sum_exp3(prev[j - 1], prev[j], curr[j - 1]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// Logarithm of the global alignment kernel.
pub fn log_gak(x: SeriesView<'_>, y: SeriesView<'_>, sigma: f64) -> Result<f64> {
    log_gak_banded(x, y, sigma, None)
}

/// The global alignment kernel value. Fails with
/// [`Error::KernelOutOfRange`] when the value is not representable as a
/// positive `f64`; use [`log_gak`] for long series.
pub fn gak(x: SeriesView<'_>, y: SeriesView<'_>, sigma: f64) -> Result<f64> {
    let v = log_gak(x, y, sigma)?.exp();
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::KernelOutOfRange)
    }
}

/// Straight linear-space evaluation of the same recurrence. Only meaningful
/// while the intermediate products stay representable; returns `None` when
/// the result is zero or non-finite.
pub fn gak_linear_space(x: SeriesView<'_>, y: SeriesView<'_>, sigma: f64) -> Result<Option<f64>> {
    check_sigma(sigma)?;
    check_pair(&x, &y, None)?;
    let (n, m) = (x.len(), y.len());
    let w = m + 1;
    let mut acc = vec![0.0; (n + 1) * w];
    acc[0] = 1.0;
    for i in 1..=n {
        for j in 1..=m {
            let kappa = log_local_kernel(x.row(i - 1), y.row(j - 1), sigma).exp();
            acc[i * w + j] =
                kappa * (acc[(i - 1) * w + j - 1] + acc[(i - 1) * w + j] + acc[i * w + j - 1]);
        }
    }
    let v = acc[n * w + m];
    Ok((v > 0.0 && v.is_finite()).then_some(v))
}

/// Bandwidth heuristic: for every unordered pair of individuals take the
/// median of all cross-timestep Euclidean distances, average those medians
/// over pairs, and scale by `multiplier`.
pub fn estimate_sigma(ds: &EmaDataset, multiplier: f64) -> Result<f64> {
    if !(multiplier > 0.0) || !multiplier.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma multiplier must be positive, got {multiplier}"
        )));
    }
    let views = ds.views()?;
    let n = views.len();
    if n < 2 {
        return Err(Error::TooFewIndividuals(n));
    }
    let medians = pairwise_symmetric(n, Some(0.0), |i, j| {
        let (x, y) = (views[i], views[j]);
        let mut dists: Vec<f64> = x
            .rows()
            .flat_map(|a| y.rows().map(move |b| squared_euclidean(a, b).sqrt()))
            .collect();
        Ok(median(&mut dists))
    })?;
    let pairs = (n * (n - 1) / 2) as f64;
    let mean = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| medians[i * n + j])
        .sum::<f64>()
        / pairs;
    let sigma = multiplier * mean;
    if sigma > 0.0 && sigma.is_finite() {
        Ok(sigma)
    } else {
        Err(Error::DegenerateSigma)
    }
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// A symmetric, numerically positive semi-definite Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    ids: Vec<String>,
    n: usize,
    k: Vec<f64>,
    sigma_used: f64,
    normalized: bool,
    min_eigenvalue: f64,
    max_eigenvalue: f64,
}

impl KernelMatrix {
    /// Checks symmetry, finiteness, the unit diagonal when `normalized` is
    /// set, and numerical positive semi-definiteness.
    pub fn new(ids: Vec<String>, k: Vec<f64>, sigma_used: f64, normalized: bool) -> Result<Self> {
        let n = ids.len();
        if k.len() != n * n {
            return Err(Error::InvalidMatrix(format!("{} entries for n = {n}", k.len())));
        }
        for i in 0..n {
            if normalized && k[i * n + i] != 1.0 {
                return Err(Error::InvalidMatrix(format!("diagonal at {i} is not 1")));
            }
            for j in 0..n {
                if !k[i * n + j].is_finite() {
                    return Err(Error::InvalidMatrix(format!("non-finite entry at ({i}, {j})")));
                }
                if k[i * n + j] != k[j * n + i] {
                    return Err(Error::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        let (min_eigenvalue, max_eigenvalue) = extreme_eigenvalues(n, &k);
        if min_eigenvalue < -PSD_TOLERANCE * max_eigenvalue.abs() {
            return Err(Error::NotPositiveSemiDefinite {
                min_eigenvalue,
                max_eigenvalue,
            });
        }
        Ok(KernelMatrix {
            ids,
            n,
            k,
            sigma_used,
            normalized,
            min_eigenvalue,
            max_eigenvalue,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], normalized: bool) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(ids, rows.concat(), f64::NAN, normalized)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.k
    }

    pub fn sigma_used(&self) -> f64 {
        self.sigma_used
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eigenvalue
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_square_csv(writer, &self.ids, &self.k)
    }

    /// Reads a matrix written by [`KernelMatrix::write_csv`]; the checks of
    /// [`KernelMatrix::new`] are repeated.
    pub fn read_csv<R: Read>(reader: R, sigma_used: f64, normalized: bool) -> Result<Self> {
        let (ids, k) = read_square_csv(reader)?;
        Self::new(ids, k, sigma_used, normalized)
    }
}

fn extreme_eigenvalues(n: usize, k: &[f64]) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = DMatrix::from_row_slice(n, n, k);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Computes the GAK Gram matrix of a missing-free dataset.
pub fn kernel_matrix(ds: &EmaDataset, cfg: &GakConfig) -> Result<KernelMatrix> {
    let sigma = match cfg.sigma {
        Some(s) => {
            check_sigma(s)?;
            s
        }
        None => estimate_sigma(ds, cfg.sigma_multiplier)?,
    };
    let views = ds.views()?;
    let n = views.len();
    let logs = pairwise_symmetric(n, None, |i, j| {
        log_gak_banded(views[i], views[j], sigma, cfg.band_radius)
    })?;
    let k: Vec<f64> = if cfg.normalize {
        (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if i == j {
                    1.0
                } else {
                    (logs[idx] - 0.5 * (logs[i * n + i] + logs[j * n + j])).exp()
                }
            })
            .collect()
    } else {
        logs.iter().map(|l| l.exp()).collect()
    };
    if k.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::KernelOutOfRange);
    }
    KernelMatrix::new(ds.ids(), k, sigma, cfg.normalize)
}

/// Feature-space distance `√(k_ii + k_jj − 2 k_ij)`; for a normalized
/// kernel this is `√(2 − 2 k̃_ij)` and lies in `[0, √2]`.
pub fn kernel_to_distance(km: &KernelMatrix) -> Result<DistanceMatrix> {
    let n = km.n;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let r = km.get(i, i) + km.get(j, j) - 2.0 * km.get(i, j);
            if r < -NEGATIVE_RADICAND_TOLERANCE {
                return Err(Error::NegativeRadicand(r));
            }
            let v = r.max(0.0).sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    DistanceMatrix::new(km.ids.clone(), d, MetricTag::KernelInduced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmaSeries, VariableSchema};
    use proptest::prelude::*;

    fn uni(v: &[f64]) -> SeriesView<'_> {
        SeriesView::new(v, 1)
    }

    /// Sum over all monotone paths of the product of local kernels.
    fn brute_force(x: SeriesView<'_>, y: SeriesView<'_>, sigma: f64) -> f64 {
        fn go(x: SeriesView<'_>, y: SeriesView<'_>, i: usize, j: usize, sigma: f64) -> f64 {
            let here = log_local_kernel(x.row(i), y.row(j), sigma).exp();
            if i + 1 == x.len() && j + 1 == y.len() {
                return here;
            }
            let mut tail = 0.0;
            if i + 1 < x.len() {
                tail += go(x, y, i + 1, j, sigma);
            }
            if j + 1 < y.len() {
                tail += go(x, y, i, j + 1, sigma);
            }
            if i + 1 < x.len() && j + 1 < y.len() {
                tail += go(x, y, i + 1, j + 1, sigma);
            }
            here * tail
        }
        go(x, y, 0, 0, sigma)
    }

    #[test]
    fn single_cell_values() {
        assert_eq!(gak(uni(&[0.7]), uni(&[0.7]), 1.3).unwrap(), 1.0);
        let (a, b, s) = (0.0, 1.5, 0.8);
        let z = (a - b) * (a - b) / (2.0 * s * s);
        let expected = (-(z + (2.0 - (-z as f64).exp()).ln())).exp();
        assert!((gak(uni(&[a]), uni(&[b]), s).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn length_two_identical_by_hand() {
        // Paths over a 2x2 grid: (0,0)->(1,1), (0,0)->(0,1)->(1,1), (0,0)->(1,0)->(1,1).
        let x = [0.0, 1.0];
        let s = 1.0;
        let k01 = log_local_kernel(&[0.0], &[1.0], s).exp();
        let expected = 1.0 * 1.0 + 2.0 * k01;
        let got = gak(uni(&x), uni(&x), s).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((brute_force(uni(&x), uni(&x), s) - expected).abs() < 1e-14);
    }

    #[test]
    fn long_series_stay_finite_in_log_space() {
        let x: Vec<f64> = (0..2000).map(|t| (t as f64 * 0.1).sin()).collect();
        let y: Vec<f64> = (0..1500).map(|t| (t as f64 * 0.13).cos()).collect();
        let l = log_gak(uni(&x), uni(&y), 0.3).unwrap();
        assert!(l.is_finite());
        assert!(gak_linear_space(uni(&x), uni(&y), 0.3).unwrap().is_none() || l.abs() < 700.0);
    }

    #[test]
    fn sigma_examples() {
        let schema = VariableSchema::new(["v"]).unwrap();
        let ds = EmaDataset::new(
            schema.clone(),
            vec![
                EmaSeries::univariate("a", &[0.0, 0.0]).unwrap(),
                EmaSeries::univariate("b", &[1.0, 1.0]).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(estimate_sigma(&ds, 1.0).unwrap(), 1.0);
        assert_eq!(estimate_sigma(&ds, 2.5).unwrap(), 2.5);

        let same = EmaDataset::new(
            schema,
            vec![
                EmaSeries::univariate("a", &[3.0, 3.0]).unwrap(),
                EmaSeries::univariate("b", &[3.0, 3.0]).unwrap(),
            ],
        )
        .unwrap();
        assert!(matches!(estimate_sigma(&same, 1.0), Err(Error::DegenerateSigma)));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn identical_series_give_all_ones() {
        let schema = VariableSchema::new(["a", "b"]).unwrap();
        let rows = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        let ds = EmaDataset::new(
            schema,
            (0..4)
                .map(|i| EmaSeries::from_rows(format!("p{i}"), &rows).unwrap())
                .collect(),
        )
        .unwrap();
        let km = kernel_matrix(&ds, &GakConfig::with_sigma(1.0)).unwrap();
        assert!(km.as_slice().iter().all(|v| (*v - 1.0).abs() < 1e-12));
        let dm = kernel_to_distance(&km).unwrap();
        assert!(dm.as_slice().iter().all(|v| *v < 1e-5));
    }

    #[test]
    fn induced_distance_examples() {
        let km = KernelMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]], true).unwrap();
        let dm = kernel_to_distance(&km).unwrap();
        assert!((dm.get(0, 1) - 1.0).abs() < 1e-15);
        assert_eq!(dm.get(0, 0), 0.0);
        assert_eq!(dm.metric_tag(), MetricTag::KernelInduced);
        let km = KernelMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]], true).unwrap();
        assert_eq!(kernel_to_distance(&km).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn rejects_indefinite_matrices() {
        let err = KernelMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]], true).unwrap_err();
        match err {
            Error::NotPositiveSemiDefinite { min_eigenvalue, .. } => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip_keeps_metadata() {
        let km = KernelMatrix::from_rows(&[vec![1.0, 0.25], vec![0.25, 1.0]], true).unwrap();
        let km = KernelMatrix { sigma_used: 1.5, ..km };
        let json = serde_json::to_string(&km).unwrap();
        assert!(json.contains("\"sigma_used\":1.5") && json.contains("\"normalized\":true"));
        assert_eq!(serde_json::from_str::<KernelMatrix>(&json).unwrap(), km);
    }

    fn arb_series(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
        (1..=max_len).prop_flat_map(move |t| proptest::collection::vec(-2.0f64..2.0, t * dim))
    }

    proptest! {
        #[test]
        fn matches_path_product_oracle(
            (d, x, y) in (1usize..=3).prop_flat_map(|d| (Just(d), arb_series(5, d), arb_series(5, d))),
            sigma in 0.3f64..3.0,
        ) {
            let (x, y) = (SeriesView::new(&x, d), SeriesView::new(&y, d));
            let got = gak(x, y, sigma).unwrap();
            let oracle = brute_force(x, y, sigma);
            prop_assert!(((got - oracle) / oracle).abs() <= 1e-9);
            let lin = gak_linear_space(x, y, sigma).unwrap().unwrap();
            prop_assert!(((got - lin) / lin).abs() <= 1e-9);
            let sym = gak(y, x, sigma).unwrap();
            prop_assert!(((got - sym) / got).abs() <= 1e-12);
            prop_assert!(got > 0.0);
        }

        #[test]
        fn induced_distance_is_a_metric(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let schema = VariableSchema::new(["a", "b"]).unwrap();
            let series = (0..6).map(|i| {
                let t = rng.gen_range(2..8);
                let rows: Vec<Vec<f64>> = (0..t).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
                EmaSeries::from_rows(format!("s{i}"), &rows).unwrap()
            }).collect();
            let ds = EmaDataset::new(schema, series).unwrap();
            let km = kernel_matrix(&ds, &GakConfig::default()).unwrap();
            let dm = kernel_to_distance(&km).unwrap();
            for i in 0..6 { for j in 0..6 { for l in 0..6 {
                prop_assert!(dm.get(i, l) <= dm.get(i, j) + dm.get(j, l) + 1e-9);
            }}}
            prop_assert!(dm.as_slice().iter().all(|v| *v >= 0.0 && *v <= 2f64.sqrt() + 1e-12));
        }
    }
}
