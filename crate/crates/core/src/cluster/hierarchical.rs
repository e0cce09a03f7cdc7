use super::kmeans::{medoid_of, members_of};
use super::{ClusterConfig, HardPartition, Linkage, Representatives};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};

/// Agglomerative clustering cut at exactly `k` clusters.
///
/// Starts from singletons and repeatedly merges the closest pair of clusters
/// under the configured linkage (Lance-Williams updates). Ties go to the pair
/// whose smallest member indices are lexicographically lowest. Labels are
/// numbered by each cluster's smallest member, so the result is fully
/// deterministic. `k = 1` is accepted and yields a single cluster.
///
/// Representatives are per-cluster medoids and the objective is the summed
/// distance from each individual to its medoid.
pub fn hierarchical(dm: &DistanceMatrix, ccfg: &ClusterConfig) -> Result<HardPartition> {
    let n = dm.n();
    let k = ccfg.k;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must lie in [1, {n}]")));
    }
    // Slot `a` holds the cluster whose smallest member is `a`.
    let mut d: Vec<f64> = dm.as_slice().to_vec();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut clusters = n;
    let mut merges = 0;
    while clusters > k {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in (0..n).filter(|&a| active[a]) {
            for b in (a + 1..n).filter(|&b| active[b]) {
                let v = d[a * n + b];
                if best.is_none_or(|(_, _, bv)| v < bv) {
                    best = Some((a, b, v));
                }
            }
        }
        let (a, b, _) = best.expect("more than k active clusters");
        for x in (0..n).filter(|&x| active[x] && x != a && x != b) {
            let (da, db) = (d[a * n + x], d[b * n + x]);
            let merged = match ccfg.linkage {
                Linkage::Single => da.min(db),
                Linkage::Complete => da.max(db),
                Linkage::Average => {
                    (size[a] as f64 * da + size[b] as f64 * db) / (size[a] + size[b]) as f64
                }
            };
            d[a * n + x] = merged;
            d[x * n + a] = merged;
        }
        size[a] += size[b];
        active[b] = false;
        for o in owner.iter_mut().filter(|o| **o == b) {
            *o = a;
        }
        clusters -= 1;
        merges += 1;
    }

    let slots: Vec<usize> = (0..n).filter(|&a| active[a]).collect();
    let labels: Vec<usize> = owner
        .iter()
        .map(|o| slots.binary_search(o).expect("owner is active"))
        .collect();
    let medoids: Vec<usize> = (0..k).map(|c| medoid_of(dm, &members_of(&labels, c))).collect();
    let objective: f64 = labels.iter().enumerate().map(|(i, &l)| dm.get(i, medoids[l])).sum();
    Ok(HardPartition::new(
        labels,
        k,
        Some(Representatives::Medoids(medoids)),
        vec![objective],
        merges,
        true,
    ))
}
