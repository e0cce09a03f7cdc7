use super::dba::refine;
use super::kmeans::{distances_to, medoid_of, members_of};
use super::{
    argmin_sticky, empty_clusters, harden_labels, plus_plus_seeds, random_partition, Barycenter,
    ClusterConfig, FuzzyPartition, Init, Representatives, DBA_INNER_ITERATIONS,
};
use crate::data::{EmaDataset, SeriesView};
use crate::distance::{distance_matrix, dtw, DistanceMatrix, DtwConfig};
use crate::error::{Error, Result};

/// FCM membership update for one row of distances.
///
/// `u_c = 1 / Σ_c' (d_c / d_c')^(2/(m-1))`, evaluated as a softmax over
/// `-(2/(m-1)) ln d_c`. A zero distance takes the whole membership (lowest
/// index first).
fn membership_row(dist: &[f64], m: f64, out: &mut [f64]) {
    out.fill(0.0);
    if let Some(c) = dist.iter().position(|&d| d == 0.0) {
        out[c] = 1.0;
        return;
    }
    let p = 2.0 / (m - 1.0);
    let hi = dist.iter().map(|d| -p * d.ln()).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, d) in out.iter_mut().zip(dist) {
        *o = (-p * d.ln() - hi).exp();
        total += *o;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

fn memberships(dist: &[f64], k: usize, m: f64) -> Vec<f64> {
    let mut u = vec![0.0; dist.len()];
    for (row, out) in dist.chunks(k).zip(u.chunks_mut(k)) {
        membership_row(row, m, out);
    }
    u
}

fn objective(u: &[f64], dist: &[f64], m: f64) -> f64 {
    u.iter()
        .zip(dist)
        .filter(|(u, _)| **u > 0.0)
        .map(|(u, d)| u.powf(m) * d * d)
        .sum()
}

/// `Σ_i Σ_c u_ic^m d(i, rep_c)²` recomputed from a partition's stored
/// memberships and representative distances.
pub fn fuzzy_objective(fp: &FuzzyPartition) -> f64 {
    objective(&fp.memberships, &fp.representative_distances, fp.m)
}

fn finish(mut fp: FuzzyPartition) -> FuzzyPartition {
    fp.empty_clusters = empty_clusters(&harden_labels(&fp), fp.k);
    fp
}

/// Fuzzy c-means with DTW distances to DBA barycenters.
pub fn fuzzy_cmeans_dtw(ds: &EmaDataset, dcfg: &DtwConfig, ccfg: &ClusterConfig) -> Result<FuzzyPartition> {
    ccfg.validate(ds.len())?;
    let dm = distance_matrix(ds, dcfg)?;
    fuzzy_cmeans_dtw_precomputed(ds, &dm, dcfg, ccfg)
}

/// [`fuzzy_cmeans_dtw`] reusing a DTW matrix of the same dataset for
/// initialization.
///
/// Barycenters are refined by DBA weighted with `u^m`; a refinement pass is
/// kept only when it does not increase the cluster's share of the objective.
pub fn fuzzy_cmeans_dtw_precomputed(
    ds: &EmaDataset,
    dm: &DistanceMatrix,
    dcfg: &DtwConfig,
    ccfg: &ClusterConfig,
) -> Result<FuzzyPartition> {
    let views = ds.views()?;
    let n = views.len();
    ccfg.validate(n)?;
    if dm.n() != n {
        return Err(Error::InvalidMatrix(format!("matrix has {} rows for {n} individuals", dm.n())));
    }
    let (k, m) = (ccfg.k, ccfg.fuzzifier);
    let mut rng = ccfg.rng();
    let mut centers: Vec<Barycenter> = match ccfg.init {
        Init::RandomPartition => {
            let labels = random_partition(n, k, &mut rng);
            (0..k)
                .map(|c| Barycenter::from_view(views[medoid_of(dm, &members_of(&labels, c))]))
                .collect()
        }
        Init::KmeansPlusPlus => plus_plus_seeds(n, k, &mut rng, |i, j| dm.get(i, j))
            .into_iter()
            .map(|s| Barycenter::from_view(views[s]))
            .collect(),
    };
    let mut dist = distances_to(&views, &centers, dcfg)?;
    let mut u = memberships(&dist, k, m);
    reseed_dead_centers(&views, &mut centers, &mut dist, &mut u, k, m, dcfg)?;
    let mut trace = vec![objective(&u, &dist, m)];
    let mut converged = false;
    let mut n_iter = 0;
    for iter in 1..=ccfg.max_iter {
        n_iter = iter;
        for c in 0..k {
            let weights: Vec<f64> = (0..n).map(|i| u[i * k + c].powf(m)).collect();
            let members: Vec<(SeriesView<'_>, f64)> =
                views.iter().copied().zip(weights.iter().copied()).collect();
            let score = |costs: &[f64]| -> f64 {
                costs.iter().zip(&weights).map(|(d, w)| w * d * d).sum()
            };
            let (updated, costs) = refine(&centers[c], &members, dcfg, DBA_INNER_ITERATIONS, score)?;
            centers[c] = updated;
            for (i, d) in costs.into_iter().enumerate() {
                dist[i * k + c] = d;
            }
        }
        u = memberships(&dist, k, m);
        reseed_dead_centers(&views, &mut centers, &mut dist, &mut u, k, m, dcfg)?;
        let current = objective(&u, &dist, m);
        let previous = *trace.last().expect("trace starts non-empty");
        trace.push(current);
        if ccfg.converged(previous, current) {
            converged = true;
            break;
        }
    }

    let mut separation = vec![0.0; k * k];
    for a in 0..k {
        for b in a + 1..k {
            let d = dtw(centers[a].view(), centers[b].view(), dcfg)?;
            separation[a * k + b] = d;
            separation[b * k + a] = d;
        }
    }
    let objective_value = *trace.last().expect("trace starts non-empty");
    Ok(finish(FuzzyPartition {
        memberships: u,
        n,
        k,
        m,
        objective: objective_value,
        objective_trace: trace,
        n_iter,
        converged,
        representatives: Representatives::Barycenters(centers),
        representative_distances: dist,
        representative_separation: separation,
        empty_clusters: Vec::new(),
    }))
}

/// A barycenter with no membership at all (every individual sits exactly on
/// another barycenter) is moved onto the individual farthest from its
/// nearest barycenter. Its objective share is zero, so this cannot increase
/// the objective.
fn reseed_dead_centers(
    views: &[SeriesView<'_>],
    centers: &mut [Barycenter],
    dist: &mut [f64],
    u: &mut Vec<f64>,
    k: usize,
    m: f64,
    dcfg: &DtwConfig,
) -> Result<()> {
    let n = views.len();
    for c in 0..k {
        let mass: f64 = (0..n).map(|i| u[i * k + c]).sum();
        if mass > 0.0 {
            continue;
        }
        let far = (0..n)
            .map(|i| (i, dist[i * k..(i + 1) * k].iter().copied().fold(f64::INFINITY, f64::min)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if far.1 <= 0.0 {
            continue;
        }
        centers[c] = Barycenter::from_view(views[far.0]);
        for (i, x) in views.iter().enumerate() {
            dist[i * k + c] = dtw(*x, centers[c].view(), dcfg)?;
        }
        *u = memberships(dist, k, m);
    }
    Ok(())
}

/// Fuzzy k-medoids over a distance matrix.
///
/// Medoids are individuals; each update takes
/// `argmin_j Σ_i u_ic^m d(i, j)²` (keeping the current medoid on ties).
/// When two clusters settle on the same medoid their memberships are merged
/// into the lower-indexed cluster and the other is reported empty.
pub fn fuzzy_kmedoids(dm: &DistanceMatrix, ccfg: &ClusterConfig) -> Result<FuzzyPartition> {
    let n = dm.n();
    ccfg.validate(n)?;
    let (k, m) = (ccfg.k, ccfg.fuzzifier);
    let mut rng = ccfg.rng();
    let mut medoids: Vec<usize> = match ccfg.init {
        // The random partition is a crisp membership matrix; the medoid step
        // below is applied to it, so groups may share a medoid.
        Init::RandomPartition => {
            let labels = random_partition(n, k, &mut rng);
            (0..k)
                .map(|c| {
                    let members = members_of(&labels, c);
                    let costs = (0..n).map(|j| {
                        members
                            .iter()
                            .map(|&i| {
                                let d = dm.get(i, j);
                                d * d
                            })
                            .sum::<f64>()
                    });
                    argmin_sticky(costs, None)
                })
                .collect()
        }
        Init::KmeansPlusPlus => plus_plus_seeds(n, k, &mut rng, |i, j| dm.get(i, j)),
    };

    let distances = |meds: &[usize]| -> Vec<f64> {
        (0..n).flat_map(|i| meds.iter().map(move |&c| dm.get(i, c))).collect()
    };
    let mut dist = distances(&medoids);
    let mut u = memberships(&dist, k, m);
    let mut trace = vec![objective(&u, &dist, m)];
    let mut converged = false;
    let mut n_iter = 0;
    for iter in 1..=ccfg.max_iter {
        n_iter = iter;
        let next: Vec<usize> = (0..k)
            .map(|c| {
                let costs = (0..n).map(|j| {
                    (0..n)
                        .map(|i| {
                            let w = u[i * k + c];
                            if w == 0.0 {
                                0.0
                            } else {
                                let d = dm.get(i, j);
                                w.powf(m) * d * d
                            }
                        })
                        .sum::<f64>()
                });
                argmin_sticky(costs, Some(medoids[c]))
            })
            .collect();
        let changed = next != medoids;
        medoids = next;
        dist = distances(&medoids);
        u = memberships(&dist, k, m);
        let current = objective(&u, &dist, m);
        let previous = *trace.last().expect("trace starts non-empty");
        trace.push(current);
        if !changed || ccfg.converged(previous, current) {
            converged = true;
            break;
        }
    }

    // Collapse clusters sharing a medoid into the first of them.
    for c in 0..k {
        if let Some(first) = (0..c).find(|&e| medoids[e] == medoids[c]) {
            for i in 0..n {
                u[i * k + first] += u[i * k + c];
                u[i * k + c] = 0.0;
            }
        }
    }
    let mut separation = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            separation[a * k + b] = dm.get(medoids[a], medoids[b]);
        }
    }
    let objective_value = objective(&u, &dist, m);
    Ok(finish(FuzzyPartition {
        memberships: u,
        n,
        k,
        m,
        objective: objective_value,
        objective_trace: trace,
        n_iter,
        converged,
        representatives: Representatives::Medoids(medoids),
        representative_distances: dist,
        representative_separation: separation,
        empty_clusters: Vec::new(),
    }))
}
