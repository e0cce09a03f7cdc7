//! DTW barycenter averaging.

use rayon::prelude::*;

use super::Barycenter;
use crate::data::SeriesView;
use crate::distance::{dtw_with_path, DtwConfig, WarpingPath};
use crate::error::Result;

/// One weighted DBA pass: align every member to `barycenter` and replace each
/// barycenter row by the weighted mean of the member rows aligned to it.
/// Rows that receive no positive weight keep their previous value.
pub fn dba_update(
    barycenter: SeriesView<'_>,
    members: &[(SeriesView<'_>, f64)],
    cfg: &DtwConfig,
) -> Result<Barycenter> {
    let paths: Vec<WarpingPath> = members
        .par_iter()
        .map(|(s, _)| dtw_with_path(barycenter, *s, cfg).map(|(_, p)| p))
        .collect::<Result<_>>()?;
    Ok(average_along(barycenter, members, &paths))
}

fn average_along(
    barycenter: SeriesView<'_>,
    members: &[(SeriesView<'_>, f64)],
    paths: &[WarpingPath],
) -> Barycenter {
    let dim = barycenter.dim();
    let len = barycenter.len();
    let mut sums = vec![0.0; len * dim];
    let mut weights = vec![0.0; len];
    for ((series, w), path) in members.iter().zip(paths) {
        if *w <= 0.0 {
            continue;
        }
        for &(b, t) in path {
            weights[b] += w;
            for (acc, v) in sums[b * dim..(b + 1) * dim].iter_mut().zip(series.row(t)) {
                *acc += w * v;
            }
        }
    }
    let mut values = barycenter.as_slice().to_vec();
    for b in 0..len {
        if weights[b] > 0.0 {
            for v in 0..dim {
                values[b * dim + v] = sums[b * dim + v] / weights[b];
            }
        }
    }
    Barycenter { values, dim }
}

/// Up to `iterations` DBA passes starting from `start`. A pass is kept only
/// if `score` of the members' DTW costs does not increase, so the returned
/// barycenter never scores worse than `start`.
///
/// Returns the barycenter and the DTW cost of every member against it.
pub(crate) fn refine<F>(
    start: &Barycenter,
    members: &[(SeriesView<'_>, f64)],
    cfg: &DtwConfig,
    iterations: usize,
    score: F,
) -> Result<(Barycenter, Vec<f64>)>
where
    F: Fn(&[f64]) -> f64,
{
    let align = |b: &Barycenter| -> Result<(Vec<f64>, Vec<WarpingPath>)> {
        let out: Vec<(f64, WarpingPath)> = members
            .par_iter()
            .map(|(s, _)| dtw_with_path(b.view(), *s, cfg))
            .collect::<Result<_>>()?;
        Ok(out.into_iter().unzip())
    };
    let mut best = start.clone();
    let (mut costs, mut paths) = align(&best)?;
    let mut best_score = score(&costs);
    for _ in 0..iterations {
        let candidate = average_along(best.view(), members, &paths);
        if candidate == best {
            break;
        }
        let (cand_costs, cand_paths) = align(&candidate)?;
        let cand_score = score(&cand_costs);
        if cand_score > best_score {
            break;
        }
        let gain = best_score - cand_score;
        best = candidate;
        costs = cand_costs;
        paths = cand_paths;
        best_score = cand_score;
        if gain <= 1e-12 * best_score.abs().max(1.0) {
            break;
        }
    }
    Ok((best, costs))
}
