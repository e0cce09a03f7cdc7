//! Dependent multivariate DTW, soft-DTW and pairwise distance matrices.
//!
//! All variables share one warping path. The local cost between two rows is
//! the squared Euclidean distance by default, and the reported DTW value is
//! the raw accumulated cost along the best path (no square root, no length
//! normalization).

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmaDataset, SeriesView};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalCost {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl LocalCost {
    #[inline]
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq = squared_euclidean(a, b);
        match self {
            LocalCost::SquaredEuclidean => sq,
            LocalCost::Euclidean => sq.sqrt(),
        }
    }
}

#[inline]
pub(crate) fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DtwConfig {
    /// Sakoe-Chiba half-width in samples; `None` is unconstrained.
    pub band_radius: Option<usize>,
    pub local_cost: LocalCost,
}

impl DtwConfig {
    pub fn with_band(radius: usize) -> Self {
        DtwConfig {
            band_radius: Some(radius),
            ..Default::default()
        }
    }
}

/// A warping path as `(x index, y index)` pairs from `(0, 0)` to the last cells.
pub type WarpingPath = Vec<(usize, usize)>;

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

#[inline]
fn in_band(i: usize, j: usize, band: Option<usize>) -> bool {
    band.is_none_or(|r| i.abs_diff(j) <= r)
}

/// DTW cost between two series.
pub fn dtw(x: SeriesView<'_>, y: SeriesView<'_>, cfg: &DtwConfig) -> Result<f64> {
    check_pair(&x, &y, cfg.band_radius)?;
    let (n, m) = (x.len(), y.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr.fill(f64::INFINITY);
        let xi = x.row(i - 1);
        for j in 1..=m {
            if !in_band(i - 1, j - 1, cfg.band_radius) {
                continue;
            }
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = cfg.local_cost.eval(xi, y.row(j - 1)) + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// DTW cost together with one optimal path. Ties prefer the diagonal
/// predecessor, then vertical (`i - 1`), then horizontal (`j - 1`).
pub fn dtw_with_path(
    x: SeriesView<'_>,
    y: SeriesView<'_>,
    cfg: &DtwConfig,
) -> Result<(f64, WarpingPath)> {
    check_pair(&x, &y, cfg.band_radius)?;
    let (n, m) = (x.len(), y.len());
    let w = m + 1;
    let mut acc = vec![f64::INFINITY; (n + 1) * w];
    acc[0] = 0.0;
    for i in 1..=n {
        let xi = x.row(i - 1);
        for j in 1..=m {
            if !in_band(i - 1, j - 1, cfg.band_radius) {
                continue;
            }
            let best = acc[(i - 1) * w + j - 1]
                .min(acc[(i - 1) * w + j])
                .min(acc[i * w + j - 1]);
            acc[i * w + j] = cfg.local_cost.eval(xi, y.row(j - 1)) + best;
        }
    }
    let cost = acc[n * w + m];

    let mut path = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        path.push((i - 1, j - 1));
        if i == 1 && j == 1 {
            break;
        }
        let diag = acc[(i - 1) * w + j - 1];
        let up = acc[(i - 1) * w + j];
        let left = acc[i * w + j - 1];
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    path.reverse();
    Ok((cost, path))
}

/// Smoothed minimum `-γ log Σ exp(-a/γ)` evaluated in log space.
#[inline]
fn soft_min(gamma: f64, a: f64, b: f64, c: f64) -> f64 {
    let lo = a.min(b).min(c);
    if lo == f64::INFINITY {
        return f64::INFINITY;
    }
    let s = (-(a - lo) / gamma).exp() + (-(b - lo) / gamma).exp() + (-(c - lo) / gamma).exp();
    lo - gamma * s.ln()
}

/// Soft-DTW: the DTW recurrence with `min` replaced by a soft minimum of
/// temperature `gamma`. Converges to [`dtw`] as `gamma → 0⁺` and never
/// exceeds it.
pub fn softdtw(x: SeriesView<'_>, y: SeriesView<'_>, gamma: f64, cfg: &DtwConfig) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    check_pair(&x, &y, cfg.band_radius)?;
    let (n, m) = (x.len(), y.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr.fill(f64::INFINITY);
        let xi = x.row(i - 1);
        for j in 1..=m {
            if !in_band(i - 1, j - 1, cfg.band_radius) {
                continue;
            }
            curr[j] =
                cfg.local_cost.eval(xi, y.row(j - 1)) + soft_min(gamma, prev[j - 1], prev[j], curr[j - 1]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricTag {
    Dtw,
    Softdtw,
    KernelInduced,
}

/// Symmetric `n × n` matrix of pairwise dissimilarities with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    n: usize,
    metric_tag: MetricTag,
    d: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry, the zero diagonal and (except for soft-DTW)
    /// non-negativity.
    pub fn new(ids: Vec<String>, d: Vec<f64>, metric_tag: MetricTag) -> Result<Self> {
        let n = ids.len();
        if d.len() != n * n {
            return Err(Error::InvalidMatrix(format!("{} entries for n = {n}", d.len())));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::InvalidMatrix(format!("non-zero diagonal at {i}")));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !v.is_finite() {
                    return Err(Error::InvalidMatrix(format!("non-finite entry at ({i}, {j})")));
                }
                if v != d[j * n + i] {
                    return Err(Error::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
                if v < 0.0 && metric_tag != MetricTag::Softdtw {
                    return Err(Error::InvalidMatrix(format!("negative entry at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix {
            ids,
            n,
            metric_tag,
            d,
        })
    }

    /// Builds a matrix from a row-of-rows literal, mostly for tests and examples.
    pub fn from_rows(rows: &[Vec<f64>], metric_tag: MetricTag) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(ids, rows.concat(), metric_tag)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn metric_tag(&self) -> MetricTag {
        self.metric_tag
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    /// Multiplies every entry by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        DistanceMatrix {
            d: self.d.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// CSV with a header row of ids followed by `n` numeric rows. Readers skip
    /// lines starting with `#`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_square_csv(writer, &self.ids, &self.d)
    }

    pub fn read_csv<R: Read>(reader: R, metric_tag: MetricTag) -> Result<Self> {
        let (ids, d) = read_square_csv(reader)?;
        Self::new(ids, d, metric_tag)
    }
}

pub(crate) fn write_square_csv<W: Write>(writer: W, ids: &[String], values: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(ids)?;
    for row in values.chunks(ids.len().max(1)) {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub(crate) fn read_square_csv<R: Read>(reader: R) -> Result<(Vec<String>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let ids: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut values = Vec::with_capacity(ids.len() * ids.len());
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            values.push(cell.parse::<f64>().map_err(|_| Error::NonNumeric {
                line,
                column: ids.get(j).cloned().unwrap_or_default(),
                value: cell.to_owned(),
            })?);
        }
    }
    Ok((ids, values))
}

/// Fills a symmetric matrix from a pairwise function evaluated on the upper
/// triangle in parallel. The result does not depend on scheduling.
pub(crate) fn pairwise_symmetric<F>(n: usize, diagonal: Option<f64>, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| {
            let start = if diagonal.is_some() { i + 1 } else { i };
            (start..n).map(move |j| (i, j))
        })
        .collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| f(i, j))
        .collect::<Result<_>>()?;
    let mut out = vec![diagonal.unwrap_or(0.0); n * n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        out[i * n + j] = v;
        out[j * n + i] = v;
    }
    Ok(out)
}

/// All pairwise DTW distances of a missing-free dataset.
pub fn distance_matrix(ds: &EmaDataset, cfg: &DtwConfig) -> Result<DistanceMatrix> {
    let views = ds.views()?;
    let d = pairwise_symmetric(views.len(), Some(0.0), |i, j| dtw(views[i], views[j], cfg))?;
    DistanceMatrix::new(ds.ids(), d, MetricTag::Dtw)
}

/// All pairwise soft-DTW values. The diagonal is forced to zero so the
/// result satisfies the matrix contract; off-diagonal entries may be negative.
pub fn softdtw_matrix(ds: &EmaDataset, gamma: f64, cfg: &DtwConfig) -> Result<DistanceMatrix> {
    let views = ds.views()?;
    let d = pairwise_symmetric(views.len(), Some(0.0), |i, j| {
        let a = softdtw(views[i], views[j], gamma, cfg)?;
        let b = softdtw(views[j], views[i], gamma, cfg)?;
        Ok(0.5 * (a + b))
    })?;
    DistanceMatrix::new(ds.ids(), d, MetricTag::Softdtw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmaSeries, VariableSchema};
    use proptest::prelude::*;

    fn uni(v: &[f64]) -> SeriesView<'_> {
        SeriesView::new(v, 1)
    }

    /// Exhaustive recursion over every monotone, continuous path.
    fn brute_force(x: SeriesView<'_>, y: SeriesView<'_>, cost: LocalCost) -> f64 {
        fn go(x: SeriesView<'_>, y: SeriesView<'_>, i: usize, j: usize, cost: LocalCost) -> f64 {
            let here = cost.eval(x.row(i), y.row(j));
            if i + 1 == x.len() && j + 1 == y.len() {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < x.len() {
                best = best.min(go(x, y, i + 1, j, cost));
            }
            if j + 1 < y.len() {
                best = best.min(go(x, y, i, j + 1, cost));
            }
            if i + 1 < x.len() && j + 1 < y.len() {
                best = best.min(go(x, y, i + 1, j + 1, cost));
            }
            here + best
        }
        go(x, y, 0, 0, cost)
    }

    #[test]
    fn hand_examples() {
        let cfg = DtwConfig::default();
        let x = [0.0, 2.0];
        let y = [0.0, 1.0, 2.0];
        assert_eq!(dtw(uni(&x), uni(&y), &cfg).unwrap(), 1.0);
        assert_eq!(brute_force(uni(&x), uni(&y), LocalCost::SquaredEuclidean), 1.0);
        assert_eq!(dtw(uni(&[0.0, 1.0]), uni(&[0.0, 1.0, 1.0]), &cfg).unwrap(), 0.0);
        assert_eq!(dtw(uni(&y), uni(&y), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn path_tie_break_prefers_diagonal_then_vertical() {
        let cfg = DtwConfig::default();
        let (cost, path) = dtw_with_path(uni(&[0.0, 2.0]), uni(&[0.0, 1.0, 2.0]), &cfg).unwrap();
        assert_eq!(cost, 1.0);
        // At (1, 2) the diagonal (0, 1) and horizontal (1, 1) predecessors both hold 1.
        assert_eq!(path, vec![(0, 0), (0, 1), (1, 2)]);

        let (_, path) = dtw_with_path(uni(&[1.0, 1.0, 1.0]), uni(&[1.0]), &cfg).unwrap();
        assert_eq!(path, vec![(0, 0), (1, 0), (2, 0)]);
    }

    #[test]
    fn path_cost_matches_reported_cost() {
        let x = [0.3, 1.5, -0.2, 0.9, 2.2];
        let y = [0.0, 1.0, 0.1, 2.0];
        let cfg = DtwConfig::default();
        let (cost, path) = dtw_with_path(uni(&x), uni(&y), &cfg).unwrap();
        let along: f64 = path.iter().map(|&(i, j)| (x[i] - y[j]).powi(2)).sum();
        assert!((cost - along).abs() < 1e-12);
        assert_eq!(cost, dtw(uni(&x), uni(&y), &cfg).unwrap());
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(4, 3)));
    }

    #[test]
    fn errors() {
        let cfg = DtwConfig::default();
        let a = [1.0, 2.0];
        assert!(matches!(
            dtw(uni(&a), SeriesView::new(&[1.0, 2.0], 2), &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(dtw(uni(&[]), uni(&a), &cfg), Err(Error::EmptySeries)));
        assert!(matches!(
            dtw(uni(&[1.0]), uni(&[1.0, 2.0, 3.0]), &DtwConfig::with_band(1)),
            Err(Error::BandTooNarrow { radius: 1, diff: 2 })
        ));
        assert!(matches!(
            dtw(uni(&[f64::NAN]), uni(&a), &cfg),
            Err(Error::MissingValues)
        ));
        assert!(matches!(
            softdtw(uni(&a), uni(&a), 0.0, &cfg),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn softdtw_limits() {
        let cfg = DtwConfig::default();
        assert_eq!(softdtw(uni(&[3.0]), uni(&[3.0]), 1.0, &cfg).unwrap(), 0.0);
        let x = [0.0, 2.0];
        let y = [0.0, 1.0, 2.0];
        let s = softdtw(uni(&x), uni(&y), 1e-3, &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-2, "{s}");
        let same = [0.5, 1.0, -1.0];
        let s = softdtw(uni(&same), uni(&same), 1.0, &cfg).unwrap();
        // at most (Tx + Ty - 1) soft-min applications, each ≥ -γ ln 3
        assert!(s <= 0.0 && s >= -(5.0 * 3f64.ln()));
    }

    /// DTW is not a metric: with the squared local cost the midpoint series
    /// `b` is closer to both ends than they are to each other.
    #[test]
    fn dtw_is_not_a_metric() {
        let cfg = DtwConfig::default();
        let (a, b, c) = ([0.0, 0.0], [1.0], [2.0, 2.0, 2.0]);
        let ab = dtw(uni(&a), uni(&b), &cfg).unwrap();
        let bc = dtw(uni(&b), uni(&c), &cfg).unwrap();
        let ac = dtw(uni(&a), uni(&c), &cfg).unwrap();
        assert_eq!((ab, bc, ac), (2.0, 3.0, 12.0));
        assert!(ac > ab + bc);
    }

    #[test]
    fn matrix_contract_and_serialization() {
        let schema = VariableSchema::new(["v"]).unwrap();
        let ds = EmaDataset::new(
            schema,
            vec![
                EmaSeries::univariate("a", &[0.0, 1.0, 2.0]).unwrap(),
                EmaSeries::univariate("b", &[0.0, 1.0, 2.0]).unwrap(),
                EmaSeries::univariate("c", &[2.0, 0.0]).unwrap(),
            ],
        )
        .unwrap();
        let dm = distance_matrix(&ds, &DtwConfig::default()).unwrap();
        assert_eq!(dm.get(0, 1), 0.0);
        assert_eq!(dm.get(0, 2), dm.get(2, 0));
        assert_eq!(dm.metric_tag(), MetricTag::Dtw);

        let mut buf = Vec::new();
        dm.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("a,b,c\n"));
        assert_eq!(DistanceMatrix::read_csv(buf.as_slice(), MetricTag::Dtw).unwrap(), dm);
        let json = serde_json::to_string(&dm).unwrap();
        assert!(json.contains("\"metric_tag\":\"dtw\""));
        assert_eq!(serde_json::from_str::<DistanceMatrix>(&json).unwrap(), dm);

        assert!(DistanceMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]], MetricTag::Dtw).is_err());
        assert!(DistanceMatrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]], MetricTag::Dtw).is_err());
        assert!(DistanceMatrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]], MetricTag::Softdtw).is_ok());
    }

    fn arb_series(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
        (1..=max_len).prop_flat_map(move |t| proptest::collection::vec(-3.0f64..3.0, t * dim))
    }

    fn arb_pair() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
        (1usize..=3).prop_flat_map(|d| (Just(d), arb_series(6, d), arb_series(6, d)))
    }

    proptest! {
        #[test]
        fn matches_brute_force((d, x, y) in arb_pair(), euclid in any::<bool>()) {
            let cost = if euclid { LocalCost::Euclidean } else { LocalCost::SquaredEuclidean };
            let cfg = DtwConfig { band_radius: None, local_cost: cost };
            let (x, y) = (SeriesView::new(&x, d), SeriesView::new(&y, d));
            let got = dtw(x, y, &cfg).unwrap();
            prop_assert!((got - brute_force(x, y, cost)).abs() <= 1e-9);
            prop_assert!((got - dtw(y, x, &cfg).unwrap()).abs() <= 1e-12);
            prop_assert_eq!(dtw(x, x, &cfg).unwrap(), 0.0);
            prop_assert!(softdtw(x, y, 0.5, &cfg).unwrap() <= got + 1e-12);
        }

        #[test]
        fn diagonal_path_bounds_equal_length((d, x) in (1usize..=3).prop_flat_map(|d| (Just(d), arb_series(8, d))), shift in -1.0f64..1.0) {
            let y: Vec<f64> = x.iter().map(|v| v * 0.7 + shift).collect();
            let (xv, yv) = (SeriesView::new(&x, d), SeriesView::new(&y, d));
            let diag: f64 = (0..xv.len()).map(|t| squared_euclidean(xv.row(t), yv.row(t))).sum();
            prop_assert!(dtw(xv, yv, &DtwConfig::default()).unwrap() <= diag + 1e-12);
        }

        #[test]
        fn widening_band_never_increases((d, x, y) in arb_pair()) {
            let (x, y) = (SeriesView::new(&x, d), SeriesView::new(&y, d));
            let free = dtw(x, y, &DtwConfig::default()).unwrap();
            let mut last = f64::INFINITY;
            for r in x.len().abs_diff(y.len())..7 {
                let banded = dtw(x, y, &DtwConfig::with_band(r)).unwrap();
                prop_assert!(banded <= last);
                prop_assert!(free <= banded);
                last = banded;
            }
            prop_assert_eq!(last, free);
        }
    }
}
