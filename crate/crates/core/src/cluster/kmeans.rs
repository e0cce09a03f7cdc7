use rayon::prelude::*;

use super::dba::refine;
use super::{
    argmin_sticky, plus_plus_seeds, random_partition, Barycenter, ClusterConfig, HardPartition, Init,
    Representatives, DBA_INNER_ITERATIONS,
};
use crate::data::{EmaDataset, SeriesView};
use crate::distance::{distance_matrix, dtw, DistanceMatrix, DtwConfig};
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;

/// Index of the member minimizing the summed distance to the other members.
pub(crate) fn medoid_of(dm: &DistanceMatrix, members: &[usize]) -> usize {
    let mut best = members[0];
    let mut best_cost = f64::INFINITY;
    for &i in members {
        let cost: f64 = members.iter().map(|&j| dm.get(i, j)).sum();
        if cost < best_cost {
            best = i;
            best_cost = cost;
        }
    }
    best
}

pub(crate) fn members_of(labels: &[usize], c: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == c).then_some(i))
        .collect()
}

/// Row-major `n × k` DTW distances from every series to every barycenter.
pub(crate) fn distances_to(
    views: &[SeriesView<'_>],
    centers: &[Barycenter],
    cfg: &DtwConfig,
) -> Result<Vec<f64>> {
    let k = centers.len();
    let rows: Vec<Vec<f64>> = views
        .par_iter()
        .map(|x| centers.iter().map(|b| dtw(*x, b.view(), cfg)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(views.len() * k);
    rows.into_iter().for_each(|r| out.extend(r));
    Ok(out)
}

fn check_matrix(n: usize, dm_n: usize) -> Result<()> {
    if n != dm_n {
        return Err(Error::InvalidMatrix(format!("matrix has {dm_n} rows for {n} individuals")));
    }
    Ok(())
}

/// Moves, for every empty cluster, the individual farthest from its own
/// center (among clusters with at least two members) into it.
/// `dist(i, label)` gives the current distance; returns the moved indices.
fn reseed_empty(labels: &mut [usize], k: usize, dist: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut moved = Vec::new();
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return moved;
        };
        let mut pick: Option<(usize, f64)> = None;
        for (i, &l) in labels.iter().enumerate() {
            if sizes[l] < 2 || moved.iter().any(|&(j, _)| j == i) {
                continue;
            }
            let d = dist(i, l);
            if pick.is_none_or(|(_, best)| d > best) {
                pick = Some((i, d));
            }
        }
        let (i, _) = pick.expect("k <= n guarantees a donor cluster");
        labels[i] = empty;
        moved.push((i, empty));
    }
}

/// Sum of DTW distances from each series to its cluster's barycenter.
pub fn dtw_partition_objective(
    ds: &EmaDataset,
    labels: &[usize],
    barycenters: &[Barycenter],
    cfg: &DtwConfig,
) -> Result<f64> {
    let views = ds.views()?;
    views
        .iter()
        .zip(labels)
        .map(|(x, &l)| dtw(*x, barycenters[l].view(), cfg))
        .sum()
}

/// Lloyd-style k-means under DTW with DBA barycenters.
pub fn kmeans_dtw(ds: &EmaDataset, dcfg: &DtwConfig, ccfg: &ClusterConfig) -> Result<HardPartition> {
    ccfg.validate(ds.len())?;
    let dm = distance_matrix(ds, dcfg)?;
    kmeans_dtw_precomputed(ds, &dm, dcfg, ccfg)
}

/// [`kmeans_dtw`] reusing a DTW matrix of the same dataset for
/// initialization (medoids and seeding).
pub fn kmeans_dtw_precomputed(
    ds: &EmaDataset,
    dm: &DistanceMatrix,
    dcfg: &DtwConfig,
    ccfg: &ClusterConfig,
) -> Result<HardPartition> {
    let views = ds.views()?;
    let n = views.len();
    ccfg.validate(n)?;
    check_matrix(n, dm.n())?;
    let k = ccfg.k;
    let mut rng = ccfg.rng();

    let (mut labels, mut centers) = match ccfg.init {
        Init::RandomPartition => {
            let labels = random_partition(n, k, &mut rng);
            let centers = (0..k)
                .map(|c| Barycenter::from_view(views[medoid_of(dm, &members_of(&labels, c))]))
                .collect::<Vec<_>>();
            (labels, centers)
        }
        Init::KmeansPlusPlus => {
            let seeds = plus_plus_seeds(n, k, &mut rng, |i, j| dm.get(i, j));
            let mut labels: Vec<usize> = (0..n)
                .map(|i| argmin_sticky(seeds.iter().map(|&s| dm.get(i, s)), None))
                .collect();
            for (c, &s) in seeds.iter().enumerate() {
                labels[s] = c;
            }
            let centers = seeds.iter().map(|&s| Barycenter::from_view(views[s])).collect();
            (labels, centers)
        }
    };

    let mut dist = distances_to(&views, &centers, dcfg)?;
    let mut trace = vec![labels.iter().enumerate().map(|(i, &l)| dist[i * k + l]).sum::<f64>()];
    let mut converged = false;
    let mut n_iter = 0;
    for iter in 1..=ccfg.max_iter {
        n_iter = iter;
        for i in 0..n {
            labels[i] = argmin_sticky(dist[i * k..(i + 1) * k].iter().copied(), Some(labels[i]));
        }
        for (i, c) in reseed_empty(&mut labels, k, |i, l| dist[i * k + l]) {
            centers[c] = Barycenter::from_view(views[i]);
        }

        let mut objective = 0.0;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<(SeriesView<'_>, f64)> =
                members_of(&labels, c).into_iter().map(|i| (views[i], 1.0)).collect();
            let (updated, costs) =
                refine(center, &members, dcfg, DBA_INNER_ITERATIONS, |c| c.iter().sum())?;
            *center = updated;
            objective += costs.iter().sum::<f64>();
        }
        let previous = *trace.last().expect("trace starts non-empty");
        trace.push(objective);
        if ccfg.converged(previous, objective) {
            converged = true;
            break;
        }
        dist = distances_to(&views, &centers, dcfg)?;
    }

    Ok(HardPartition::new(
        labels,
        k,
        Some(Representatives::Barycenters(centers)),
        trace,
        n_iter,
        converged,
    ))
}

/// Squared feature-space distances `n × k` from each point to each cluster
/// mean of `labels`. Empty clusters get `+∞`.
fn feature_distances(km: &KernelMatrix, labels: &[usize], k: usize) -> Vec<f64> {
    let n = km.n();
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    // cross[i][c] = Σ_{j ∈ c} k(i, j)
    let mut cross = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..n {
            cross[i * k + labels[j]] += km.get(i, j);
        }
    }
    let mut within = vec![0.0; k];
    for j in 0..n {
        within[labels[j]] += cross[j * k + labels[j]];
    }
    let mut out = vec![f64::INFINITY; n * k];
    for i in 0..n {
        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            let s = sizes[c] as f64;
            out[i * k + c] = km.get(i, i) - 2.0 * cross[i * k + c] / s + within[c] / (s * s);
        }
    }
    out
}

/// `Σ_i ‖φ(x_i) − μ_{C(i)}‖²` for a labeling.
pub fn kernel_kmeans_objective(km: &KernelMatrix, labels: &[usize], k: usize) -> f64 {
    let d2 = feature_distances(km, labels, k);
    labels.iter().enumerate().map(|(i, &l)| d2[i * k + l]).sum()
}

/// Kernel k-means on a Gram matrix.
pub fn kernel_kmeans(km: &KernelMatrix, ccfg: &ClusterConfig) -> Result<HardPartition> {
    let n = km.n();
    ccfg.validate(n)?;
    let k = ccfg.k;
    let mut rng = ccfg.rng();
    let labels = match ccfg.init {
        Init::RandomPartition => random_partition(n, k, &mut rng),
        Init::KmeansPlusPlus => {
            let d2 = |i: usize, j: usize| (km.get(i, i) + km.get(j, j) - 2.0 * km.get(i, j)).max(0.0);
            let seeds = plus_plus_seeds(n, k, &mut rng, d2);
            let mut labels: Vec<usize> = (0..n)
                .map(|i| argmin_sticky(seeds.iter().map(|&s| d2(i, s)), None))
                .collect();
            for (c, &s) in seeds.iter().enumerate() {
                labels[s] = c;
            }
            labels
        }
    };
    kernel_kmeans_from_labels(km, labels, ccfg)
}

/// Kernel k-means started from an explicit labeling.
pub fn kernel_kmeans_from_labels(
    km: &KernelMatrix,
    mut labels: Vec<usize>,
    ccfg: &ClusterConfig,
) -> Result<HardPartition> {
    let n = km.n();
    ccfg.validate(n)?;
    let k = ccfg.k;
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(Error::InvalidParameter("initial labels do not match n and k".into()));
    }
    reseed_empty(&mut labels, k, |_, _| 0.0);

    let mut trace = vec![kernel_kmeans_objective(km, &labels, k)];
    let mut converged = false;
    let mut n_iter = 0;
    for iter in 1..=ccfg.max_iter {
        n_iter = iter;
        let d2 = feature_distances(km, &labels, k);
        let mut next: Vec<usize> = (0..n)
            .map(|i| argmin_sticky(d2[i * k..(i + 1) * k].iter().copied(), Some(labels[i])))
            .collect();
        let after = feature_distances(km, &next, k);
        reseed_empty(&mut next, k, |i, l| after[i * k + l]);
        let objective = kernel_kmeans_objective(km, &next, k);
        let previous = *trace.last().expect("trace starts non-empty");
        let changed = next != labels;
        labels = next;
        trace.push(objective);
        if !changed || ccfg.converged(previous, objective) {
            converged = true;
            break;
        }
    }
    Ok(HardPartition::new(labels, k, None, trace, n_iter, converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmaSeries, VariableSchema};

    fn two_groups() -> EmaDataset {
        let a = [0.0, 1.0, 2.0, 1.0, 0.0];
        let b = [5.0, 5.0, 4.0, 6.0];
        let series = (0..6)
            .map(|i| {
                let v: &[f64] = if i % 2 == 0 { &a } else { &b };
                EmaSeries::univariate(format!("p{i}"), v).unwrap()
            })
            .collect();
        EmaDataset::new(VariableSchema::new(["v"]).unwrap(), series).unwrap()
    }

    fn same_cluster(labels: &[usize], i: usize, j: usize) -> bool {
        labels[i] == labels[j]
    }

    #[test]
    fn kmeans_dtw_separates_identical_groups() {
        let ds = two_groups();
        for init in [Init::RandomPartition, Init::KmeansPlusPlus] {
            for seed in 0..5 {
                let cfg = ClusterConfig {
                    init,
                    ..ClusterConfig::new(2).with_seed(seed)
                };
                let hp = kmeans_dtw(&ds, &DtwConfig::default(), &cfg).unwrap();
                assert_eq!(hp.objective, 0.0, "{init:?} seed {seed}");
                assert!(same_cluster(&hp.labels, 0, 2) && same_cluster(&hp.labels, 0, 4));
                assert!(same_cluster(&hp.labels, 1, 3) && !same_cluster(&hp.labels, 0, 1));
                assert!(hp.converged);
            }
        }
    }

    #[test]
    fn kmeans_dtw_all_identical() {
        let series = (0..4)
            .map(|i| EmaSeries::univariate(format!("p{i}"), &[1.0, 2.0, 3.0]).unwrap())
            .collect();
        let ds = EmaDataset::new(VariableSchema::new(["v"]).unwrap(), series).unwrap();
        let hp = kmeans_dtw(&ds, &DtwConfig::default(), &ClusterConfig::new(2)).unwrap();
        assert_eq!(hp.objective, 0.0);
    }

    #[test]
    fn kmeans_dtw_objective_recomputes() {
        let ds = two_groups();
        let hp = kmeans_dtw(&ds, &DtwConfig::default(), &ClusterConfig::new(3).with_seed(1)).unwrap();
        let Some(Representatives::Barycenters(b)) = &hp.representatives else {
            panic!("barycenters expected")
        };
        let recomputed = dtw_partition_objective(&ds, &hp.labels, b, &DtwConfig::default()).unwrap();
        assert!((recomputed - hp.objective).abs() < 1e-9);
    }

    fn block_kernel() -> KernelMatrix {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| if i % 2 == j % 2 { 1.0 } else { 0.1 }).collect())
            .collect();
        KernelMatrix::from_rows(&rows, true).unwrap()
    }

    #[test]
    fn kernel_kmeans_recovers_blocks() {
        let km = block_kernel();
        for seed in 0..10 {
            let hp = kernel_kmeans(&km, &ClusterConfig::new(2).with_seed(seed)).unwrap();
            assert!(hp.objective.abs() < 1e-12, "seed {seed}: {}", hp.objective);
            assert!(same_cluster(&hp.labels, 0, 2) && same_cluster(&hp.labels, 0, 4));
            assert!(!same_cluster(&hp.labels, 0, 1));
        }
    }

    #[test]
    fn singleton_cluster_has_zero_distance() {
        let km = block_kernel();
        let labels = vec![0, 1, 1, 1, 1, 1];
        let d2 = feature_distances(&km, &labels, 2);
        assert!(d2[0].abs() < 1e-15);
    }

    #[test]
    fn kernel_kmeans_reseeds_empty_clusters() {
        let km = block_kernel();
        let hp = kernel_kmeans_from_labels(&km, vec![0; 6], &ClusterConfig::new(3)).unwrap();
        assert_eq!(hp.k_effective(), 3);
        assert!(hp.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn rejects_mismatched_labels() {
        let km = block_kernel();
        assert!(kernel_kmeans_from_labels(&km, vec![0, 1], &ClusterConfig::new(2)).is_err());
        assert!(kernel_kmeans_from_labels(&km, vec![0, 1, 2, 0, 1, 0], &ClusterConfig::new(2)).is_err());
    }
}
