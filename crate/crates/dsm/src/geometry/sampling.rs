//! Exact k-nearest-neighbor search and farthest point sampling.
//!
//! Both are brute-force and deterministic: ties are always broken by the
//! lower index so results are reproducible across runs and platforms.

use super::{NeighborIndex, PointCloud};
use crate::error::{Error, Result};

/// Exact k nearest neighbors of every query point among `reference`, by
/// squared Euclidean distance. Neighbor lists come back in ascending
/// distance; equal distances are ordered by lower reference index.
pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::invalid("knn requires k >= 1"));
    }
    if k > reference.len() {
        return Err(Error::invalid(format!(
            "knn: k = {} exceeds reference size {}",
            k,
            reference.len()
        )));
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for &q in query.iter() {
        scored.clear();
        scored.extend(
            reference
                .iter()
                .enumerate()
                .map(|(j, &r)| (q.dist2(r), j)),
        );
        // (distance, index) order gives the deterministic tie-break for free.
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        indices.extend(scored[..k].iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex::from_rows(k, indices))
}

/// Greedy max-min (farthest point) sampling. The first selected index is
/// `start`; each subsequent pick maximizes the distance to the selected
/// set, ties broken by lower index.
pub fn farthest_point_sampling(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "farthest point sampling: k = {k} out of range 1..={n}"
        )));
    }
    if start >= n {
        return Err(Error::invalid(format!(
            "farthest point sampling: start index {start} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_dist2 = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    for _ in 1..k {
        let cp = cloud.point(current);
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for i in 0..n {
            let d2 = cp.dist2(cloud.point(i));
            if d2 < min_dist2[i] {
                min_dist2[i] = d2;
            }
            // Strict > keeps the lowest index among ties.
            if min_dist2[i] > best {
                best = min_dist2[i];
                best_idx = i;
            }
        }
        current = best_idx;
        selected.push(current);
    }
    Ok(selected)
}
