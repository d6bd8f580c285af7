//! Geometry-aware point cloud sampling.
//!
//! Features are refined by self-attention at a pyramid of resolutions
//! (farthest-point-sampled subsets of the cloud), and a bounded per-point
//! position regression emits the sampled cloud from farthest-point seeds.
//! The sampling significance map measures how far each original point is
//! from the sampled set; the Chamfer loss trains the regressed positions.

use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, farthest_point_sampling, NeighborIndex, Point3, PointCloud};
use crate::nn::attention::{
    neighborhood_attention_backward, neighborhood_attention_forward, AttentionCache,
};
use crate::nn::{tanh_backward, tanh_forward, DenseArray, Linear, LinearInit, ParameterStore};
use rand::Rng;

/// Output of one sampling pass.
#[derive(Debug, Clone)]
pub struct SamplingResult {
    /// The regressed output cloud.
    pub sampled: PointCloud,
    /// Per-input-point significance (squared meters): distance from each
    /// input point to the sampled set.
    pub significance: Vec<f64>,
    /// Attention resolutions that were used.
    pub resolutions: Vec<usize>,
}

/// Smallest resolution the attention pyramid may reach.
pub const MIN_RESOLUTION: usize = 4;

// ---------------------------------------------------------------------------
// Multi-resolution self-attention
// ---------------------------------------------------------------------------

/// Self-attention among farthest-point-sampled subsets at `levels`
/// resolutions (`n, n/2, n/4, ...`), propagated back to every point by
/// nearest-selected-point copy and projected to width `F`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub levels: usize,
    pub feature_dim: usize,
    q_layers: Vec<Linear>,
    k_layers: Vec<Linear>,
    v_layers: Vec<Linear>,
    proj: Linear,
}

/// Cache of one [`SelfAttention::forward`] pass.
pub struct SelfAttentionCache {
    level_caches: Vec<AttentionCache>,
    level_indices: Vec<NeighborIndex>,
    selections: Vec<Vec<usize>>,
    /// For each level, the selected-point index each input point copies
    /// its refined feature from.
    copy_from: Vec<Vec<usize>>,
    concat: DenseArray,
    n: usize,
}

impl SelfAttentionCache {
    #[cfg(test)]
    pub(crate) fn level_probs(&self, level: usize) -> &DenseArray {
        &self.level_caches[level].probs
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.selections.iter().map(Vec::len).collect()
    }
}

/// Full index lists (every selected point attends to all of them).
fn full_index(m: usize) -> NeighborIndex {
    let mut indices = Vec::with_capacity(m * m);
    for _ in 0..m {
        indices.extend(0..m);
    }
    NeighborIndex::from_rows(m, indices)
}

impl SelfAttention {
    pub fn new(
        store: &mut ParameterStore,
        levels: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut q_layers = Vec::new();
        let mut k_layers = Vec::new();
        let mut v_layers = Vec::new();
        for l in 0..levels {
            q_layers.push(Linear::new(
                store,
                &format!("pcs.r{l}.q"),
                feature_dim,
                feature_dim,
                LinearInit::Xavier,
                rng,
            ));
            k_layers.push(Linear::new(
                store,
                &format!("pcs.r{l}.k"),
                feature_dim,
                feature_dim,
                LinearInit::Xavier,
                rng,
            ));
            v_layers.push(Linear::new(
                store,
                &format!("pcs.r{l}.v"),
                feature_dim,
                feature_dim,
                LinearInit::Xavier,
                rng,
            ));
        }
        let proj = Linear::new(
            store,
            "pcs.proj",
            levels * feature_dim,
            feature_dim,
            LinearInit::Xavier,
            rng,
        );
        SelfAttention {
            levels,
            feature_dim,
            q_layers,
            k_layers,
            v_layers,
            proj,
        }
    }

    /// Refine per-point features. `weights` scales each point's
    /// contribution inside the attention (all-ones is neutral); the
    /// farthest-point selections are treated as constants.
    pub fn forward(
        &self,
        store: &ParameterStore,
        cloud: &PointCloud,
        feats: &DenseArray,
        weights: &[f64],
    ) -> Result<(DenseArray, SelfAttentionCache)> {
        let n = cloud.len();
        if feats.rows() != n || weights.len() != n {
            return Err(Error::ShapeMismatch {
                layer: "self_attention".to_string(),
                expected: vec![n, self.feature_dim],
                actual: feats.shape().to_vec(),
            });
        }
        let smallest = n >> (self.levels - 1);
        if smallest < MIN_RESOLUTION {
            return Err(Error::invalid(format!(
                "smallest attention resolution {smallest} is below {MIN_RESOLUTION} (cloud has {n} points)"
            )));
        }

        let f = self.feature_dim;
        let mut level_caches = Vec::with_capacity(self.levels);
        let mut level_indices = Vec::with_capacity(self.levels);
        let mut selections = Vec::with_capacity(self.levels);
        let mut copy_from = Vec::with_capacity(self.levels);
        let mut concat = DenseArray::zeros(&[n, self.levels * f]);

        for l in 0..self.levels {
            let m = n >> l;
            let sel: Vec<usize> = if m == n {
                (0..n).collect()
            } else {
                farthest_point_sampling(cloud, m, 0)?
            };

            // Gather selected features and weights.
            let mut x = DenseArray::zeros(&[m, f]);
            let mut w_sel = Vec::with_capacity(m);
            for (r, &idx) in sel.iter().enumerate() {
                x.row_mut(r).copy_from_slice(feats.row(idx));
                w_sel.push(weights[idx]);
            }

            let index = full_index(m);
            let (att, cache) = neighborhood_attention_forward(
                store,
                &self.q_layers[l],
                &self.k_layers[l],
                &self.v_layers[l],
                &x,
                &index,
                &w_sel,
            )?;

            // Propagate each selected point's refined feature to every
            // input point via its nearest selected point.
            let copies: Vec<usize> = if m == n {
                (0..n).collect()
            } else {
                (0..n)
                    .map(|i| {
                        let p = cloud.point(i);
                        let mut best = f64::INFINITY;
                        let mut best_r = 0;
                        for (r, &idx) in sel.iter().enumerate() {
                            let d2 = p.dist2(cloud.point(idx));
                            if d2 < best {
                                best = d2;
                                best_r = r;
                            }
                        }
                        best_r
                    })
                    .collect()
            };
            for i in 0..n {
                concat.row_mut(i)[l * f..(l + 1) * f].copy_from_slice(att.row(copies[i]));
            }

            level_caches.push(cache);
            level_indices.push(index);
            selections.push(sel);
            copy_from.push(copies);
        }

        let out = self.proj.forward(store, &concat)?;
        let cache = SelfAttentionCache {
            level_caches,
            level_indices,
            selections,
            copy_from,
            concat,
            n,
        };
        Ok((out, cache))
    }

    /// Backward pass; returns the gradient with respect to the input
    /// features.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &SelfAttentionCache,
        grad_out: &DenseArray,
    ) -> DenseArray {
        let n = cache.n;
        let f = self.feature_dim;
        let grad_concat = self.proj.backward(store, &cache.concat, grad_out);

        let mut grad_feats = DenseArray::zeros(&[n, f]);
        for l in 0..self.levels {
            let m = cache.selections[l].len();
            // Gather the propagated gradient back onto the selected points.
            let mut grad_att = DenseArray::zeros(&[m, f]);
            for i in 0..n {
                let r = cache.copy_from[l][i];
                let src = &grad_concat.row(i)[l * f..(l + 1) * f];
                let dst = grad_att.row_mut(r);
                for c in 0..f {
                    dst[c] += src[c];
                }
            }
            let grad_x = neighborhood_attention_backward(
                store,
                &self.q_layers[l],
                &self.k_layers[l],
                &self.v_layers[l],
                &cache.level_caches[l],
                &cache.level_indices[l],
                &grad_att,
            );
            // Scatter back to the full feature rows.
            for (r, &idx) in cache.selections[l].iter().enumerate() {
                let dst = grad_feats.row_mut(idx);
                for c in 0..f {
                    dst[c] += grad_x.row(r)[c];
                }
            }
        }
        grad_feats
    }
}

// ---------------------------------------------------------------------------
// Position regression
// ---------------------------------------------------------------------------

/// Per-seed position regression: a small MLP on the refined feature of each
/// farthest-point seed emits a bounded offset (`tanh`, 10% of the
/// bounding-box diagonal) added to the seed position. The output layer is
/// zero-initialized, so an untrained head reproduces the seed subset
/// exactly.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    hidden: Linear,
    output: Linear,
    pub hidden_dim: usize,
}

/// Fraction of the bounding-box diagonal that bounds regressed offsets.
pub const OFFSET_BOUND_FRACTION: f64 = 0.1;

/// Cache of one [`RegressionHead::forward`] pass.
pub struct RegressCache {
    seeds: Vec<usize>,
    x: DenseArray,
    act: DenseArray,
    raw: DenseArray,
    bound: f64,
    n: usize,
}

impl RegressCache {
    pub fn seeds(&self) -> &[usize] {
        &self.seeds
    }
}

impl RegressionHead {
    pub fn new(
        store: &mut ParameterStore,
        feature_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        RegressionHead {
            hidden: Linear::new(store, "pcs.reg.hidden", feature_dim, hidden_dim, LinearInit::Xavier, rng),
            output: Linear::new(store, "pcs.reg.output", hidden_dim, 3, LinearInit::Zeros, rng),
            hidden_dim,
        }
    }

    /// Select `n_out` farthest-point seeds and emit `seed + offset` per
    /// seed.
    pub fn forward(
        &self,
        store: &ParameterStore,
        refined: &DenseArray,
        cloud: &PointCloud,
        n_out: usize,
    ) -> Result<(PointCloud, RegressCache)> {
        let n = cloud.len();
        if n_out == 0 || n_out > n {
            return Err(Error::invalid(format!(
                "regression output size {n_out} out of range 1..={n}"
            )));
        }
        let seeds = farthest_point_sampling(cloud, n_out, 0)?;
        let f = refined.cols();
        let mut x = DenseArray::zeros(&[n_out, f]);
        for (r, &s) in seeds.iter().enumerate() {
            x.row_mut(r).copy_from_slice(refined.row(s));
        }
        let act = tanh_forward(&self.hidden.forward(store, &x)?);
        let raw = self.output.forward(store, &act)?;
        let bound = OFFSET_BOUND_FRACTION * cloud.bbox_diagonal();
        let mut points = Vec::with_capacity(n_out);
        for (r, &s) in seeds.iter().enumerate() {
            let p = cloud.point(s);
            let o = raw.row(r);
            points.push(Point3::new(
                p.x + bound * o[0].tanh(),
                p.y + bound * o[1].tanh(),
                p.z + bound * o[2].tanh(),
            ));
        }
        let sampled = PointCloud::new(points)?;
        Ok((
            sampled,
            RegressCache {
                seeds,
                x,
                act,
                raw,
                bound,
                n,
            },
        ))
    }

    /// Backward from position gradients (`n_out×3`) to the refined input
    /// features (`n×F`).
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &RegressCache,
        grad_positions: &DenseArray,
    ) -> DenseArray {
        let n_out = cache.seeds.len();
        let mut grad_raw = DenseArray::zeros(&[n_out, 3]);
        for r in 0..n_out {
            for c in 0..3 {
                let t = cache.raw.row(r)[c].tanh();
                grad_raw.row_mut(r)[c] = grad_positions.row(r)[c] * cache.bound * (1.0 - t * t);
            }
        }
        let grad_act = self.output.backward(store, &cache.act, &grad_raw);
        let grad_pre = tanh_backward(&cache.act, &grad_act);
        let grad_x = self.hidden.backward(store, &cache.x, &grad_pre);
        let f = grad_x.cols();
        let mut grad_refined = DenseArray::zeros(&[cache.n, f]);
        for (r, &s) in cache.seeds.iter().enumerate() {
            let dst = grad_refined.row_mut(s);
            for c in 0..f {
                dst[c] += grad_x.row(r)[c];
            }
        }
        grad_refined
    }
}

// ---------------------------------------------------------------------------
// Significance map and Chamfer loss
// ---------------------------------------------------------------------------

/// Sampling significance: for each original point, its squared distance to
/// the nearest sampled point. Zero exactly when the point coincides with a
/// sample; large values mark geometry the sample fails to represent.
pub fn significance_map_s(original: &PointCloud, sampled: &PointCloud) -> Vec<f64> {
    original
        .iter()
        .map(|&p| {
            sampled
                .iter()
                .map(|&o| p.dist2(o))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Chamfer loss with gradients for the sampled side. The value is exactly
/// [`chamfer_distance`]; the gradient routes subgradients at ties to the
/// lowest-index nearest neighbor.
pub fn loss_ls_with_grad(original: &PointCloud, sampled: &PointCloud) -> (f64, DenseArray) {
    let n_p = original.len();
    let n_o = sampled.len();
    let mut grad = DenseArray::zeros(&[n_o, 3]);

    // Original -> sampled direction: each original point pulls its nearest
    // sample toward it.
    let inv_p = 1.0 / n_p as f64;
    for &p in original.iter() {
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for (j, &o) in sampled.iter().enumerate() {
            let d2 = p.dist2(o);
            if d2 < best {
                best = d2;
                best_j = j;
            }
        }
        let o = sampled.point(best_j);
        let g = grad.row_mut(best_j);
        g[0] += 2.0 * inv_p * (o.x - p.x);
        g[1] += 2.0 * inv_p * (o.y - p.y);
        g[2] += 2.0 * inv_p * (o.z - p.z);
    }

    // Sampled -> original direction: each sample is pulled toward its
    // nearest original point.
    let inv_o = 1.0 / n_o as f64;
    for (j, &o) in sampled.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_p = original.point(0);
        for &p in original.iter() {
            let d2 = o.dist2(p);
            if d2 < best {
                best = d2;
                best_p = p;
            }
        }
        let g = grad.row_mut(j);
        g[0] += 2.0 * inv_o * (o.x - best_p.x);
        g[1] += 2.0 * inv_o * (o.y - best_p.y);
        g[2] += 2.0 * inv_o * (o.z - best_p.z);
    }

    (chamfer_distance(original, sampled), grad)
}
