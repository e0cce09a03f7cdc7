//! Cluster validity: silhouette, fuzzy indices and run-to-run instability.

use std::io::Write;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{derive_seed, harden, FuzzyPartition, HardPartition};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};

/// Largest `k` for which label permutations are enumerated exhaustively.
pub const EXHAUSTIVE_MATCHING_MAX_K: usize = 8;

/// Runs whose median disagreement with the other runs exceeds this multiple
/// of the median pair disagreement are flagged as outliers.
pub const OUTLIER_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub silhouette_mean: f64,
    pub silhouette_per_individual: Vec<f64>,
    pub pc: Option<f64>,
    pub pe: Option<f64>,
    pub xb: Option<f64>,
    pub k_effective: usize,
}

/// Silhouette of a hard partition over populated clusters only.
///
/// Members of singleton clusters score 0.
pub fn silhouette(dm: &DistanceMatrix, hp: &HardPartition) -> Result<QualityReport> {
    let n = dm.n();
    if hp.labels.len() != n {
        return Err(Error::DimensionMismatch { left: n, right: hp.labels.len() });
    }
    let sizes = hp.cluster_sizes();
    let populated: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] > 0).collect();
    if populated.len() < 2 {
        return Err(Error::SilhouetteUndefined(populated.len()));
    }
    let per: Vec<f64> = (0..n)
        .map(|i| {
            let own = hp.labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; sizes.len()];
            for j in 0..n {
                if j != i {
                    sums[hp.labels[j]] += dm.get(i, j);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = populated
                .iter()
                .filter(|&&c| c != own)
                .map(|&c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(QualityReport {
        silhouette_mean: per.iter().sum::<f64>() / n as f64,
        silhouette_per_individual: per,
        pc: None,
        pe: None,
        xb: None,
        k_effective: populated.len(),
    })
}

/// `(1/N) Σ_i Σ_c u_ic²`.
pub fn partition_coefficient(fp: &FuzzyPartition) -> f64 {
    fp.memberships.iter().map(|u| u * u).sum::<f64>() / fp.n as f64
}

/// `-(1/N) Σ_i Σ_c u_ic ln u_ic` with `0 ln 0 = 0`.
pub fn partition_entropy(fp: &FuzzyPartition) -> f64 {
    let s: f64 = fp
        .memberships
        .iter()
        .filter(|&&u| u > 0.0)
        .map(|u| u * u.ln())
        .sum();
    // keeps the one-hot case at +0.0
    0.0 - s / fp.n as f64
}

/// Clusters that still carry membership mass. Collapsed duplicates carry
/// none and take no part in the separation term.
fn live_clusters(fp: &FuzzyPartition) -> Vec<usize> {
    (0..fp.k)
        .filter(|&c| (0..fp.n).any(|i| fp.membership(i, c) > 0.0))
        .collect()
}

fn xie_beni_from(
    fp: &FuzzyPartition,
    dist: impl Fn(usize, usize) -> f64,
    sep: impl Fn(usize, usize) -> f64,
) -> Result<f64> {
    let mut num = 0.0;
    for i in 0..fp.n {
        for c in 0..fp.k {
            let u = fp.membership(i, c);
            if u > 0.0 {
                let d = dist(i, c);
                num += u.powf(fp.m) * d * d;
            }
        }
    }
    let live = live_clusters(fp);
    let mut min_sep = f64::INFINITY;
    for (x, &a) in live.iter().enumerate() {
        for &b in &live[x + 1..] {
            let s = sep(a, b);
            min_sep = min_sep.min(s * s);
        }
    }
    if !(min_sep > 0.0 && min_sep.is_finite()) {
        return Err(Error::DegenerateSeparation);
    }
    Ok(num / (fp.n as f64 * min_sep))
}

/// Xie-Beni index with medoid representatives read from `dm`.
pub fn xie_beni(fp: &FuzzyPartition, dm: &DistanceMatrix, medoids: &[usize]) -> Result<f64> {
    if medoids.len() != fp.k {
        return Err(Error::DimensionMismatch { left: fp.k, right: medoids.len() });
    }
    if dm.n() != fp.n {
        return Err(Error::DimensionMismatch { left: fp.n, right: dm.n() });
    }
    xie_beni_from(fp, |i, c| dm.get(i, medoids[c]), |a, b| dm.get(medoids[a], medoids[b]))
}

/// Xie-Beni index from the representative distances stored on the partition.
/// Works for barycenter representatives as well as medoids.
pub fn xie_beni_stored(fp: &FuzzyPartition) -> Result<f64> {
    let k = fp.k;
    if fp.representative_distances.len() != fp.n * k || fp.representative_separation.len() != k * k {
        return Err(Error::InvalidParameter(
            "partition carries no representative distances".into(),
        ));
    }
    xie_beni_from(
        fp,
        |i, c| fp.representative_distances[i * k + c],
        |a, b| fp.representative_separation[a * k + b],
    )
}

/// Silhouette on the hardened partition plus PC, PE and XB. XB is left out
/// when the surviving representatives coincide.
pub fn evaluate_fuzzy(dm: &DistanceMatrix, fp: &FuzzyPartition) -> Result<QualityReport> {
    let mut report = silhouette(dm, &harden(fp))?;
    report.pc = Some(partition_coefficient(fp));
    report.pe = Some(partition_entropy(fp));
    report.xb = match xie_beni_stored(fp) {
        Ok(v) => Some(v),
        Err(Error::DegenerateSeparation) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

/// Fraction of individuals on which two labelings disagree after the best
/// one-to-one relabeling of `a` onto `b`.
pub fn label_disagreement(a: &[usize], b: &[usize], k: usize) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::IncompatibleRuns(format!(
            "labelings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(&l) = a.iter().chain(b).find(|&&l| l >= k) {
        return Err(Error::IncompatibleRuns(format!("label {l} out of range for k = {k}")));
    }
    let mut confusion = vec![0i64; k * k];
    for (&x, &y) in a.iter().zip(b) {
        confusion[x * k + y] += 1;
    }
    let agree = if k <= EXHAUSTIVE_MATCHING_MAX_K {
        best_permutation(&confusion, k)
    } else {
        best_assignment(&confusion, k)
    };
    Ok(1.0 - agree as f64 / a.len() as f64)
}

/// Maximum matched agreement over all `k!` permutations.
pub(crate) fn best_permutation(confusion: &[i64], k: usize) -> i64 {
    fn go(confusion: &[i64], k: usize, row: usize, used: &mut [bool], acc: i64, best: &mut i64) {
        if row == k {
            *best = (*best).max(acc);
            return;
        }
        for col in 0..k {
            if !used[col] {
                used[col] = true;
                go(confusion, k, row + 1, used, acc + confusion[row * k + col], best);
                used[col] = false;
            }
        }
    }
    let mut best = 0;
    go(confusion, k, 0, &mut vec![false; k], 0, &mut best);
    best
}

/// Maximum matched agreement by optimal assignment.
pub(crate) fn best_assignment(confusion: &[i64], k: usize) -> i64 {
    let weights = Matrix::from_vec(k, k, confusion.to_vec()).expect("square confusion matrix");
    kuhn_munkres(&weights).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub instability: f64,
    pub n_runs: usize,
    /// Silhouette per run; `None` where a run left fewer than two populated
    /// clusters. Empty when no distance matrix was supplied.
    pub silhouette_distribution: Vec<Option<f64>>,
    /// Row-major `n_runs × n_runs` disagreement matrix.
    pub pairwise_disagreements: Vec<f64>,
    pub seeds: Vec<u64>,
    pub outlier_runs: Vec<usize>,
}

impl StabilityReport {
    pub fn disagreement(&self, r: usize, s: usize) -> f64 {
        self.pairwise_disagreements[r * self.n_runs + s]
    }

    /// Interquartile range of the defined silhouettes.
    pub fn silhouette_iqr(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.silhouette_distribution.iter().flatten().copied().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(quantile(&v, 0.75) - quantile(&v, 0.25))
    }

    /// `run_index,seed,silhouette` rows; undefined silhouettes are left blank.
    pub fn write_silhouette_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["run_index", "seed", "silhouette"])?;
        for (r, s) in self.silhouette_distribution.iter().enumerate() {
            let seed = self.seeds.get(r).map_or(String::new(), u64::to_string);
            let sil = s.map_or(String::new(), |v| v.to_string());
            w.write_record([r.to_string(), seed, sil])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean disagreement over all unordered pairs of runs.
pub fn instability(runs: &[HardPartition]) -> Result<StabilityReport> {
    let r = runs.len();
    if r < 2 {
        return Err(Error::IncompatibleRuns(format!("need at least 2 runs, got {r}")));
    }
    let (n, k) = (runs[0].n(), runs[0].k);
    if let Some(bad) = runs.iter().find(|p| p.n() != n || p.k != k) {
        return Err(Error::IncompatibleRuns(format!(
            "run with n = {}, k = {} against n = {n}, k = {k}",
            bad.n(),
            bad.k
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..r).flat_map(|a| (a + 1..r).map(move |b| (a, b))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| label_disagreement(&runs[a].labels, &runs[b].labels, k))
        .collect::<Result<_>>()?;
    let mut matrix = vec![0.0; r * r];
    for (&(a, b), &v) in pairs.iter().zip(&values) {
        matrix[a * r + b] = v;
        matrix[b * r + a] = v;
    }
    let instability = values.iter().sum::<f64>() / values.len() as f64;

    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = OUTLIER_FACTOR * quantile(&sorted, 0.5);
    let outlier_runs = (0..r)
        .filter(|&a| {
            let mut own: Vec<f64> = (0..r).filter(|&b| b != a).map(|b| matrix[a * r + b]).collect();
            own.sort_by(f64::total_cmp);
            quantile(&own, 0.5) > threshold
        })
        .collect();

    Ok(StabilityReport {
        instability,
        n_runs: r,
        silhouette_distribution: Vec::new(),
        pairwise_disagreements: matrix,
        seeds: Vec::new(),
        outlier_runs,
    })
}

/// Runs `run` once per derived seed on fixed inputs, then reports instability
/// and the silhouette of every run against `dm`.
pub fn stability_suite<F>(dm: &DistanceMatrix, n_runs: usize, master_seed: u64, run: F) -> Result<StabilityReport>
where
    F: Fn(u64) -> Result<HardPartition> + Sync,
{
    let seeds: Vec<u64> = (0..n_runs as u64).map(|r| derive_seed(master_seed, r)).collect();
    let runs: Vec<HardPartition> = seeds.par_iter().map(|&s| run(s)).collect::<Result<_>>()?;
    let mut report = instability(&runs)?;
    report.silhouette_distribution = runs
        .iter()
        .map(|hp| match silhouette(dm, hp) {
            Ok(q) => Ok(Some(q.silhouette_mean)),
            Err(Error::SilhouetteUndefined(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    report.seeds = seeds;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{hierarchical, ClusterConfig};
    use crate::distance::MetricTag;
    use proptest::prelude::*;

    fn hard(labels: Vec<usize>, k: usize) -> HardPartition {
        HardPartition::new(labels, k, None, vec![0.0], 0, true)
    }

    fn block_matrix(labels: &[usize], within: f64, between: f64) -> DistanceMatrix {
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, a)| {
                labels
                    .iter()
                    .enumerate()
                    .map(|(j, b)| if i == j { 0.0 } else if a == b { within } else { between })
                    .collect()
            })
            .collect();
        DistanceMatrix::from_rows(&rows, MetricTag::Dtw).unwrap()
    }

    #[test]
    fn silhouette_of_separated_blocks() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let q = silhouette(&block_matrix(&labels, 1.0, 10.0), &hard(labels, 2)).unwrap();
        for s in &q.silhouette_per_individual {
            assert!((s - 0.9).abs() < 1e-12);
        }
        assert!((q.silhouette_mean - 0.9).abs() < 1e-12);
    }

    #[test]
    fn silhouette_meaningless_grouping_and_singletons() {
        let labels = vec![0, 0, 1, 1];
        let q = silhouette(&block_matrix(&labels, 3.0, 3.0), &hard(labels, 2)).unwrap();
        assert!(q.silhouette_per_individual.iter().all(|&s| s == 0.0));

        let labels = vec![0, 0, 0, 1];
        let q = silhouette(&block_matrix(&labels, 1.0, 5.0), &hard(labels, 2)).unwrap();
        assert_eq!(q.silhouette_per_individual[3], 0.0);
        assert!((q.silhouette_per_individual[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn silhouette_needs_two_populated_clusters() {
        let labels = vec![1, 1, 1];
        let err = silhouette(&block_matrix(&labels, 1.0, 1.0), &hard(labels, 3)).unwrap_err();
        assert!(matches!(err, Error::SilhouetteUndefined(1)));
    }

    #[test]
    fn silhouette_skips_empty_clusters() {
        let labels = vec![0, 0, 2, 2];
        let dm = block_matrix(&labels, 1.0, 10.0);
        let q = silhouette(&dm, &hard(labels, 3)).unwrap();
        assert_eq!(q.k_effective, 2);
        assert!((q.silhouette_mean - 0.9).abs() < 1e-12);
    }

    #[test]
    fn pc_pe_hand_values() {
        let fp = FuzzyPartition::from_memberships(&[vec![0.8, 0.2], vec![0.3, 0.7]], 2.0).unwrap();
        assert!((partition_coefficient(&fp) - 0.63).abs() < 1e-12);
        let pe = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln() + 0.3 * 0.3f64.ln() + 0.7 * 0.7f64.ln()) / 2.0;
        assert!((partition_entropy(&fp) - pe).abs() < 1e-12);
        assert!(partition_entropy(&fp) < 2f64.ln());

        let one_hot = FuzzyPartition::from_memberships(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2.0).unwrap();
        assert_eq!(partition_coefficient(&one_hot), 1.0);
        assert_eq!(partition_entropy(&one_hot), 0.0);
        let uniform = FuzzyPartition::from_memberships(&[vec![0.5, 0.5], vec![0.5, 0.5]], 2.0).unwrap();
        assert_eq!(partition_coefficient(&uniform), 0.5);
        assert!((partition_entropy(&uniform) - 2f64.ln()).abs() < 1e-12);
    }

    fn four_points() -> DistanceMatrix {
        DistanceMatrix::from_rows(
            &[
                vec![0.0, 1.0, 4.0, 5.0],
                vec![1.0, 0.0, 3.0, 4.0],
                vec![4.0, 3.0, 0.0, 2.0],
                vec![5.0, 4.0, 2.0, 0.0],
            ],
            MetricTag::Dtw,
        )
        .unwrap()
    }

    #[test]
    fn xie_beni_hand_value() {
        let fp = FuzzyPartition::from_memberships(
            &[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.0, 1.0]],
            2.0,
        )
        .unwrap();
        // medoids 0 and 3: numerator terms u² d²
        let num = 0.01 * 25.0 + 0.64 * 1.0 + 0.04 * 16.0 + 0.09 * 16.0 + 0.49 * 4.0;
        let expected = num / (4.0 * 25.0);
        let xb = xie_beni(&fp, &four_points(), &[0, 3]).unwrap();
        assert!((xb - expected).abs() < 1e-12);
        let doubled = xie_beni(&fp, &four_points().scaled(2.0), &[0, 3]).unwrap();
        assert!((doubled - xb).abs() < 1e-12);
    }

    #[test]
    fn xie_beni_zero_and_degenerate() {
        let fp = FuzzyPartition::from_memberships(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2.0).unwrap();
        let dm = DistanceMatrix::from_rows(&[vec![0.0, 3.0], vec![3.0, 0.0]], MetricTag::Dtw).unwrap();
        assert_eq!(xie_beni(&fp, &dm, &[0, 1]).unwrap(), 0.0);
        let fp = FuzzyPartition::from_memberships(&[vec![0.5, 0.5], vec![0.5, 0.5]], 2.0).unwrap();
        assert!(matches!(xie_beni(&fp, &dm, &[0, 0]), Err(Error::DegenerateSeparation)));
    }

    #[test]
    fn disagreement_examples() {
        assert_eq!(label_disagreement(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        assert_eq!(label_disagreement(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap(), 0.0);
        assert_eq!(label_disagreement(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap(), 0.5);
    }

    #[test]
    fn instability_of_identical_runs_is_zero() {
        let runs = vec![hard(vec![0, 1, 1, 2], 3); 4];
        let rep = instability(&runs).unwrap();
        assert_eq!(rep.instability, 0.0);
        assert!(rep.outlier_runs.is_empty());
        assert_eq!(rep.pairwise_disagreements.len(), 16);
    }

    #[test]
    fn instability_rejects_mismatched_runs() {
        assert!(instability(&[hard(vec![0, 1], 2)]).is_err());
        assert!(instability(&[hard(vec![0, 1], 2), hard(vec![0, 1, 1], 2)]).is_err());
        assert!(instability(&[hard(vec![0, 1], 2), hard(vec![0, 1], 3)]).is_err());
    }

    #[test]
    fn outlier_run_is_flagged() {
        let mut runs = vec![hard(vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1], 2); 5];
        runs.push(hard(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2));
        let rep = instability(&runs).unwrap();
        assert_eq!(rep.outlier_runs, vec![5]);
    }

    #[test]
    fn deterministic_suite_has_zero_spread() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let dm = block_matrix(&labels, 1.0, 4.0);
        let rep = stability_suite(&dm, 5, 11, |seed| hierarchical(&dm, &ClusterConfig::new(2).with_seed(seed))).unwrap();
        assert_eq!(rep.instability, 0.0);
        assert_eq!(rep.silhouette_iqr(), Some(0.0));
        assert_eq!(rep.seeds.len(), 5);
        let mut buf = Vec::new();
        rep.write_silhouette_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }

    fn labeling(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0..k, n)
    }

    proptest! {
        #[test]
        fn matching_routes_agree(k in 2usize..7, a in labeling(25, 6), b in labeling(25, 6)) {
            let a: Vec<usize> = a.into_iter().map(|l| l % k).collect();
            let b: Vec<usize> = b.into_iter().map(|l| l % k).collect();
            let mut confusion = vec![0i64; k * k];
            for (&x, &y) in a.iter().zip(&b) {
                confusion[x * k + y] += 1;
            }
            prop_assert_eq!(best_permutation(&confusion, k), best_assignment(&confusion, k));
        }

        #[test]
        fn disagreement_is_a_pseudometric(k in 2usize..5, a in labeling(12, 4), b in labeling(12, 4), c in labeling(12, 4)) {
            let fix = |v: Vec<usize>| -> Vec<usize> { v.into_iter().map(|l| l % k).collect() };
            let (a, b, c) = (fix(a), fix(b), fix(c));
            let ab = label_disagreement(&a, &b, k).unwrap();
            let ba = label_disagreement(&b, &a, k).unwrap();
            let bc = label_disagreement(&b, &c, k).unwrap();
            let ac = label_disagreement(&a, &c, k).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let permuted: Vec<usize> = a.iter().map(|&l| (l + 1) % k).collect();
            prop_assert_eq!(label_disagreement(&a, &permuted, k).unwrap(), 0.0);
        }

        #[test]
        fn silhouette_invariances(labels in labeling(10, 3), scale in 0.1f64..50.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = labels.len();
            let mut rows = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let v: f64 = rng.gen_range(0.1..5.0);
                    rows[i][j] = v;
                    rows[j][i] = v;
                }
            }
            let dm = DistanceMatrix::from_rows(&rows, MetricTag::Dtw).unwrap();
            let hp = hard(labels.clone(), 3);
            if hp.k_effective() < 2 {
                return Ok(());
            }
            let base = silhouette(&dm, &hp).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base.silhouette_mean));
            let scaled = silhouette(&dm.scaled(scale), &hp).unwrap();
            prop_assert!((scaled.silhouette_mean - base.silhouette_mean).abs() < 1e-12);
            let relabeled = hard(labels.iter().map(|&l| (l + 1) % 3).collect(), 3);
            let rel = silhouette(&dm, &relabeled).unwrap();
            prop_assert!((rel.silhouette_mean - base.silhouette_mean).abs() < 1e-12);
        }
    }
}
