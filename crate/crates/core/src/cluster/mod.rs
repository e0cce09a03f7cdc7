//! Clustering engines: DTW k-means with DBA barycenters, kernel k-means,
//! agglomerative clustering, fuzzy c-means over DTW and fuzzy k-medoids.
//!
//! Every iterative engine records its objective after initialization and
//! after each iteration in `objective_trace`; the trace never increases.

mod dba;
mod fuzzy;
mod hierarchical;
mod kmeans;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SeriesView;
use crate::error::{Error, Result};

pub use dba::dba_update;
pub use fuzzy::{fuzzy_cmeans_dtw, fuzzy_cmeans_dtw_precomputed, fuzzy_kmedoids, fuzzy_objective};
pub use hierarchical::hierarchical;
pub use kmeans::{
    dtw_partition_objective, kernel_kmeans, kernel_kmeans_from_labels, kernel_kmeans_objective,
    kmeans_dtw, kmeans_dtw_precomputed,
};

/// Number of DBA refinement passes per barycenter update.
pub const DBA_INNER_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Average,
    Complete,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Shuffle the individuals and deal them round-robin into `k` clusters.
    #[default]
    RandomPartition,
    /// Distance-proportional seeding of `k` distinct individuals.
    KmeansPlusPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Convergence threshold on the objective change, relative to
    /// `max(1, |objective|)`.
    pub tol: f64,
    pub seed: u64,
    /// Fuzzifier `m > 1`; only used by the fuzzy engines.
    pub fuzzifier: f64,
    pub linkage: Linkage,
    pub init: Init,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 2,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
            fuzzifier: 2.0,
            linkage: Linkage::Average,
            init: Init::RandomPartition,
        }
    }
}

impl ClusterConfig {
    pub fn new(k: usize) -> Self {
        ClusterConfig {
            k,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks `2 ≤ k ≤ n`, `m > 1`, `tol > 0` and `max_iter ≥ 1`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < 2 || self.k > n {
            return Err(Error::Config(format!("k = {} must lie in [2, {n}]", self.k)));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.fuzzifier > 1.0) || !self.fuzzifier.is_finite() {
            return Err(Error::Config(format!("fuzzifier must exceed 1, got {}", self.fuzzifier)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub(crate) fn converged(&self, previous: f64, current: f64) -> bool {
        (previous - current).abs() <= self.tol * previous.abs().max(1.0)
    }
}

/// Deterministic per-run seed from a master seed and a run index.
pub fn derive_seed(master_seed: u64, run_index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(run_index);
    rng.next_u64()
}

/// A barycenter series owned by a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Barycenter {
    pub values: Vec<f64>,
    pub dim: usize,
}

impl Barycenter {
    pub fn from_view(view: SeriesView<'_>) -> Self {
        Barycenter {
            values: view.as_slice().to_vec(),
            dim: view.dim(),
        }
    }

    pub fn view(&self) -> SeriesView<'_> {
        SeriesView::new(&self.values, self.dim)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representatives {
    /// Indices of individuals acting as cluster representatives.
    Medoids(Vec<usize>),
    Barycenters(Vec<Barycenter>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardPartition {
    pub labels: Vec<usize>,
    pub k: usize,
    pub representatives: Option<Representatives>,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    /// Clusters in `0..k` with no member.
    pub empty_clusters: Vec<usize>,
}

impl HardPartition {
    pub(crate) fn new(
        labels: Vec<usize>,
        k: usize,
        representatives: Option<Representatives>,
        objective_trace: Vec<f64>,
        n_iter: usize,
        converged: bool,
    ) -> Self {
        let objective = objective_trace.last().copied().unwrap_or(0.0);
        let empty_clusters = empty_clusters(&labels, k);
        HardPartition {
            labels,
            k,
            representatives,
            objective,
            objective_trace,
            n_iter,
            converged,
            empty_clusters,
        }
    }

    /// Number of populated clusters.
    pub fn k_effective(&self) -> usize {
        self.k - self.empty_clusters.len()
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyPartition {
    /// Row-major `n × k` membership matrix; rows sum to one.
    pub memberships: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub m: f64,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub representatives: Representatives,
    /// Row-major `n × k` distances from each individual to each representative.
    pub representative_distances: Vec<f64>,
    /// Row-major `k × k` distances between representatives.
    pub representative_separation: Vec<f64>,
    /// Clusters that no individual is hardened into (including collapsed
    /// duplicates).
    pub empty_clusters: Vec<usize>,
}

impl FuzzyPartition {
    /// Builds a partition from explicit memberships, mainly for evaluating
    /// indices on hand-made inputs. Distances are left empty.
    pub fn from_memberships(rows: &[Vec<f64>], m: f64) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if n == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParameter("membership matrix must be non-empty and rectangular".into()));
        }
        for r in rows {
            let s: f64 = r.iter().sum();
            if r.iter().any(|u| !(0.0..=1.0).contains(u)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("invalid membership row {r:?}")));
            }
        }
        let memberships = rows.concat();
        let mut fp = FuzzyPartition {
            memberships,
            n,
            k,
            m,
            objective: 0.0,
            objective_trace: Vec::new(),
            n_iter: 0,
            converged: true,
            representatives: Representatives::Medoids(Vec::new()),
            representative_distances: Vec::new(),
            representative_separation: Vec::new(),
            empty_clusters: Vec::new(),
        };
        fp.empty_clusters = empty_clusters(&harden_labels(&fp), k);
        Ok(fp)
    }

    #[inline]
    pub fn membership(&self, i: usize, c: usize) -> f64 {
        self.memberships[i * self.k + c]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.memberships[i * self.k..(i + 1) * self.k]
    }

    pub fn k_effective(&self) -> usize {
        self.k - self.empty_clusters.len()
    }

    /// Medoid indices, when the representatives are individuals.
    pub fn medoids(&self) -> Option<&[usize]> {
        match &self.representatives {
            Representatives::Medoids(m) => Some(m),
            Representatives::Barycenters(_) => None,
        }
    }
}

fn harden_labels(fp: &FuzzyPartition) -> Vec<usize> {
    (0..fp.n)
        .map(|i| {
            let row = fp.row(i);
            let mut best = 0;
            for c in 1..fp.k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Hard labels by per-row argmax; ties go to the lowest cluster index.
pub fn harden(fp: &FuzzyPartition) -> HardPartition {
    let labels = harden_labels(fp);
    let empty = empty_clusters(&labels, fp.k);
    HardPartition {
        labels,
        k: fp.k,
        representatives: Some(fp.representatives.clone()),
        objective: fp.objective,
        objective_trace: fp.objective_trace.clone(),
        n_iter: fp.n_iter,
        converged: fp.converged,
        empty_clusters: empty,
    }
}

pub(crate) fn empty_clusters(labels: &[usize], k: usize) -> Vec<usize> {
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    (0..k).filter(|&c| !seen[c]).collect()
}

/// Balanced random partition: shuffle, then deal round-robin.
pub(crate) fn random_partition<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % k;
    }
    labels
}

/// Distance-proportional seeding of `k` distinct indices. `dist(i, j)` must be
/// non-negative; weights are the distance to the nearest chosen seed.
pub(crate) fn plus_plus_seeds<R: Rng>(
    n: usize,
    k: usize,
    rng: &mut R,
    dist: impl Fn(usize, usize) -> f64,
) -> Vec<usize> {
    let mut seeds = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, seeds[0])).collect();
    while seeds.len() < k {
        let candidates: Vec<usize> = (0..n).filter(|i| !seeds.contains(i)).collect();
        let total: f64 = candidates.iter().map(|&i| nearest[i]).sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = *candidates.last().expect("k <= n");
            for &i in &candidates {
                if nearest[i] > 0.0 && target < nearest[i] {
                    pick = i;
                    break;
                }
                target -= nearest[i];
            }
            pick
        } else {
            candidates[rng.gen_range(0..candidates.len())]
        };
        seeds.push(next);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist(i, next));
        }
    }
    seeds
}

/// Index minimizing `cost`, preferring `current` on exact ties and otherwise
/// the lowest index.
pub(crate) fn argmin_sticky(costs: impl Iterator<Item = f64>, current: Option<usize>) -> usize {
    let costs: Vec<f64> = costs.collect();
    let mut best = 0;
    for (c, &v) in costs.iter().enumerate().skip(1) {
        if v < costs[best] {
            best = c;
        }
    }
    match current {
        Some(cur) if costs[cur] == costs[best] => cur,
        _ => best,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harden_examples() {
        let fp = FuzzyPartition::from_memberships(
            &[vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.2, 0.7, 0.1]],
            2.0,
        )
        .unwrap();
        let hp = harden(&fp);
        assert_eq!(hp.labels, vec![0, 0, 1]);
        assert_eq!(hp.empty_clusters, vec![2]);
        assert_eq!(hp.k_effective(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(ClusterConfig::new(1).validate(5).is_err());
        assert!(ClusterConfig::new(6).validate(5).is_err());
        assert!(ClusterConfig::new(5).validate(5).is_ok());
        let mut c = ClusterConfig::new(2);
        c.fuzzifier = 1.0;
        assert!(c.validate(5).is_err());
        c.fuzzifier = 2.0;
        c.tol = 0.0;
        assert!(c.validate(5).is_err());
        c.tol = 1e-6;
        c.max_iter = 0;
        assert!(c.validate(5).is_err());
    }

    #[test]
    fn random_partition_is_balanced_and_seeded() {
        let a = random_partition(10, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let b = random_partition(10, 3, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let mut sizes = [0; 3];
        a.iter().for_each(|&l| sizes[l] += 1);
        assert_eq!(sizes, [4, 3, 3]);
    }

    #[test]
    fn plus_plus_seeds_are_distinct() {
        let pts = [0.0f64, 0.1, 5.0, 5.1, 9.0];
        for seed in 0..20 {
            let s = plus_plus_seeds(5, 4, &mut ChaCha8Rng::seed_from_u64(seed), |i, j| {
                (pts[i] - pts[j]).powi(2)
            });
            let mut sorted = s.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 4);
        }
    }

    #[test]
    fn derived_seeds_differ_per_run() {
        let a: Vec<u64> = (0..5).map(|r| derive_seed(7, r)).collect();
        let mut b = a.clone();
        b.dedup();
        assert_eq!(a.len(), b.len());
        assert_eq!(derive_seed(7, 3), a[3]);
    }

    #[test]
    fn argmin_prefers_current_on_ties() {
        assert_eq!(argmin_sticky([1.0, 0.5, 0.5].into_iter(), Some(2)), 2);
        assert_eq!(argmin_sticky([1.0, 0.5, 0.5].into_iter(), Some(0)), 1);
        assert_eq!(argmin_sticky([1.0, 0.5, 0.5].into_iter(), None), 1);
    }
}
