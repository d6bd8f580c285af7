//! Density-aware point cloud registration.
//!
//! Per-point features are refined by cross-attention kernels over kNN
//! neighborhoods at several horizon sizes, masked by an attention-queried
//! local/global discrepancy. A row-stochastic similarity matrix between the
//! refined feature sets yields hard correspondences for RANSAC and a soft
//! path for the training loss. The registration significance map (the
//! per-point top-5 similarity mass) feeds the cyclic weighting.

use crate::encoder::FeatureDistribution;
use crate::error::{Error, Result};
use crate::geometry::{
    apply_transform, kabsch, knn, NeighborIndex, Point3, PointCloud, RigidTransform,
};
use crate::nn::attention::{
    neighborhood_attention_backward, neighborhood_attention_forward, AttentionCache,
};
use crate::nn::{
    sigmoid, softmax_rows, softmax_rows_backward, DenseArray, Linear, LinearInit, ParameterStore,
};
use nalgebra::Vector3;
use rand::Rng;

/// Row-stochastic correspondence scores between a source and a target
/// cloud: entry `(i, j)` is the probability mass source point `i` puts on
/// target point `j`.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    data: DenseArray,
}

impl SimilarityMatrix {
    /// Validates row-stochasticity: entries in `[0, 1]`, rows summing to 1
    /// within 1e-6.
    pub fn new(data: DenseArray) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::invalid("similarity matrix must be 2-D"));
        }
        for i in 0..data.rows() {
            let row = data.row(i);
            let mut sum = 0.0;
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "similarity entry {v} outside [0, 1] in row {i}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "similarity row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(SimilarityMatrix { data })
    }

    pub fn n_src(&self) -> usize {
        self.data.rows()
    }

    pub fn n_tgt(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn as_array(&self) -> &DenseArray {
        &self.data
    }
}

/// Output of one registration: the estimated transform plus everything the
/// cyclic pipeline reuses.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub similarity: SimilarityMatrix,
    /// Top-5 similarity mass per source point (in `(0, 1]`).
    pub significance: Vec<f64>,
    /// Inlier flag per proposed correspondence under the final transform.
    pub inlier_flags: Vec<bool>,
    /// Mean post-alignment distance over all proposed correspondences.
    pub residual: f64,
}

/// RANSAC settings.
#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub iters: usize,
    /// Absolute inlier threshold in meters; `None` derives
    /// `0.05 * source bounding-box diagonal`.
    pub inlier_tau: Option<f64>,
    /// Minimum fraction of correspondences the best consensus set must
    /// reach; below it the registration is declared failed. Chance
    /// consensus on garbage correspondences clears the bare 3-inlier floor,
    /// so a fraction gate is what actually rejects it.
    pub min_inlier_fraction: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iters: 512,
            inlier_tau: None,
            min_inlier_fraction: 0.2,
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-horizon cross-attention with the density mask
// ---------------------------------------------------------------------------

/// The registration feature refiner: one attention kernel per horizon over
/// kNN neighborhoods, concatenated and projected back to width `F`, then
/// multiplied by a per-point density mask queried against the global
/// feature.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub horizons: Vec<usize>,
    pub feature_dim: usize,
    q_layers: Vec<Linear>,
    k_layers: Vec<Linear>,
    v_layers: Vec<Linear>,
    proj: Linear,
    mask_q: Linear,
    mask_k: Linear,
}

/// Cache of one [`CrossAttention::forward`] pass.
pub struct CrossAttentionCache {
    neighbor_sets: Vec<NeighborIndex>,
    kernels: Vec<AttentionCache>,
    concat: DenseArray,
    proj_out: DenseArray,
    masks: Vec<f64>,
    mask_queries: DenseArray,
    mask_key: DenseArray,
    feats: DenseArray,
    global: DenseArray,
}

impl CrossAttentionCache {
    /// Attention probabilities of horizon `hi` (test introspection).
    #[cfg(test)]
    pub(crate) fn kernel_probs(&self, hi: usize) -> &DenseArray {
        &self.kernels[hi].probs
    }

    pub fn masks(&self) -> &[f64] {
        &self.masks
    }
}

impl CrossAttention {
    pub fn new(
        store: &mut ParameterStore,
        horizons: Vec<usize>,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut q_layers = Vec::new();
        let mut k_layers = Vec::new();
        let mut v_layers = Vec::new();
        for (hi, _) in horizons.iter().enumerate() {
            q_layers.push(Linear::new(
                store,
                &format!("pcr.h{hi}.q"),
                feature_dim,
                feature_dim,
                LinearInit::Xavier,
                rng,
            ));
            k_layers.push(Linear::new(
                store,
                &format!("pcr.h{hi}.k"),
                feature_dim,
                feature_dim,
                LinearInit::Xavier,
                rng,
            ));
            v_layers.push(Linear::new(
                store,
                &format!("pcr.h{hi}.v"),
                feature_dim,
                feature_dim,
                LinearInit::Xavier,
                rng,
            ));
        }
        let proj = Linear::new(
            store,
            "pcr.proj",
            horizons.len() * feature_dim,
            feature_dim,
            LinearInit::Xavier,
            rng,
        );
        let mask_q = Linear::new(
            store,
            "pcr.mask_q",
            feature_dim,
            feature_dim,
            LinearInit::Xavier,
            rng,
        );
        let mask_k = Linear::new(
            store,
            "pcr.mask_k",
            feature_dim,
            feature_dim,
            LinearInit::Xavier,
            rng,
        );
        CrossAttention {
            horizons,
            feature_dim,
            q_layers,
            k_layers,
            v_layers,
            proj,
            mask_q,
            mask_k,
        }
    }

    /// Refine one cloud's per-point features. `weights` scales each point's
    /// contribution inside every attention kernel (all-ones is neutral).
    pub fn forward(
        &self,
        store: &ParameterStore,
        cloud: &PointCloud,
        feats: &DenseArray,
        global: &DenseArray,
        weights: &[f64],
    ) -> Result<(DenseArray, CrossAttentionCache)> {
        let n = cloud.len();
        if feats.rows() != n || weights.len() != n {
            return Err(Error::ShapeMismatch {
                layer: "cross_attention".to_string(),
                expected: vec![n, self.feature_dim],
                actual: feats.shape().to_vec(),
            });
        }
        for &h in &self.horizons {
            if h > n {
                return Err(Error::invalid(format!(
                    "attention horizon {h} exceeds cloud size {n}"
                )));
            }
        }

        let f = self.feature_dim;
        let mut neighbor_sets = Vec::with_capacity(self.horizons.len());
        let mut kernels = Vec::with_capacity(self.horizons.len());
        let mut concat = DenseArray::zeros(&[n, self.horizons.len() * f]);
        for (hi, &h) in self.horizons.iter().enumerate() {
            let nbrs = knn(cloud, cloud, h)?;
            let (att, cache) = neighborhood_attention_forward(
                store,
                &self.q_layers[hi],
                &self.k_layers[hi],
                &self.v_layers[hi],
                feats,
                &nbrs,
                weights,
            )?;
            for i in 0..n {
                concat.row_mut(i)[hi * f..(hi + 1) * f].copy_from_slice(att.row(i));
            }
            neighbor_sets.push(nbrs);
            kernels.push(cache);
        }

        let proj_out = self.proj.forward(store, &concat)?;

        // Density mask: query each point's feature against the global one.
        let mask_queries = self.mask_q.forward(store, feats)?;
        let mask_key = self.mask_k.forward(store, global)?;
        let scale = 1.0 / (f as f64).sqrt();
        let key_row = mask_key.row(0);
        let mut masks = Vec::with_capacity(n);
        let mut out = DenseArray::zeros(&[n, f]);
        for i in 0..n {
            let qrow = mask_queries.row(i);
            let mut dot = 0.0;
            for d in 0..f {
                dot += qrow[d] * key_row[d];
            }
            let m = sigmoid(dot * scale);
            masks.push(m);
            let orow = out.row_mut(i);
            for (d, &p) in proj_out.row(i).iter().enumerate() {
                orow[d] = p * m;
            }
        }

        let cache = CrossAttentionCache {
            neighbor_sets,
            kernels,
            concat,
            proj_out,
            masks,
            mask_queries,
            mask_key,
            feats: feats.clone(),
            global: global.clone(),
        };
        Ok((out, cache))
    }

    /// Backward pass; returns gradients for the input features and the
    /// global feature row.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &CrossAttentionCache,
        grad_out: &DenseArray,
    ) -> (DenseArray, DenseArray) {
        let n = cache.feats.rows();
        let f = self.feature_dim;
        let scale = 1.0 / (f as f64).sqrt();

        // Through the mask multiplication.
        let mut grad_proj = DenseArray::zeros(&[n, f]);
        let mut grad_scores = vec![0.0f64; n];
        for i in 0..n {
            let m = cache.masks[i];
            let gi = grad_out.row(i);
            let prow = cache.proj_out.row(i);
            let gp = grad_proj.row_mut(i);
            let mut dmask = 0.0;
            for d in 0..f {
                gp[d] = gi[d] * m;
                dmask += gi[d] * prow[d];
            }
            grad_scores[i] = dmask * m * (1.0 - m);
        }

        // Mask query/key paths.
        let key_row = cache.mask_key.row(0);
        let mut grad_mask_q = DenseArray::zeros(&[n, f]);
        let mut grad_mask_k = DenseArray::zeros(&[1, f]);
        for i in 0..n {
            let ds = grad_scores[i] * scale;
            if ds == 0.0 {
                continue;
            }
            let qrow = cache.mask_queries.row(i);
            let gq = grad_mask_q.row_mut(i);
            for d in 0..f {
                gq[d] += ds * key_row[d];
                grad_mask_k.row_mut(0)[d] += ds * qrow[d];
            }
        }
        let mut grad_feats = self.mask_q.backward(store, &cache.feats, &grad_mask_q);
        let grad_global = self.mask_k.backward(store, &cache.global, &grad_mask_k);

        // Projection back to the concatenated attention outputs.
        let grad_concat = self.proj.backward(store, &cache.concat, &grad_proj);
        for (hi, _) in self.horizons.iter().enumerate() {
            let mut grad_att = DenseArray::zeros(&[n, f]);
            for i in 0..n {
                grad_att
                    .row_mut(i)
                    .copy_from_slice(&grad_concat.row(i)[hi * f..(hi + 1) * f]);
            }
            let gx = neighborhood_attention_backward(
                store,
                &self.q_layers[hi],
                &self.k_layers[hi],
                &self.v_layers[hi],
                &cache.kernels[hi],
                &cache.neighbor_sets[hi],
                &grad_att,
            );
            grad_feats.add_assign(&gx);
        }

        (grad_feats, grad_global)
    }
}

/// Refine both clouds of a registration pair with the same kernel
/// parameters: each cloud attends over its own neighborhoods, masked
/// against its own global feature, under its own incoming weights.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_features(
    attention: &CrossAttention,
    store: &ParameterStore,
    src_cloud: &PointCloud,
    src: &FeatureDistribution,
    src_global: &FeatureDistribution,
    tgt_cloud: &PointCloud,
    tgt: &FeatureDistribution,
    tgt_global: &FeatureDistribution,
    src_weights: &[f64],
    tgt_weights: &[f64],
) -> Result<(DenseArray, CrossAttentionCache, DenseArray, CrossAttentionCache)> {
    let (src_refined, src_cache) =
        attention.forward(store, src_cloud, &src.mean, &src_global.mean, src_weights)?;
    let (tgt_refined, tgt_cache) =
        attention.forward(store, tgt_cloud, &tgt.mean, &tgt_global.mean, tgt_weights)?;
    Ok((src_refined, src_cache, tgt_refined, tgt_cache))
}

// ---------------------------------------------------------------------------
// Similarity matrix
// ---------------------------------------------------------------------------

/// Row-softmax of the negative squared feature distance scaled by
/// `1/sqrt(F)`.
pub fn similarity_matrix(
    src_refined: &DenseArray,
    tgt_refined: &DenseArray,
) -> Result<SimilarityMatrix> {
    let f = src_refined.cols();
    if tgt_refined.cols() != f {
        return Err(Error::ShapeMismatch {
            layer: "similarity_matrix".to_string(),
            expected: vec![src_refined.rows(), f],
            actual: tgt_refined.shape().to_vec(),
        });
    }
    let logits = similarity_logits(src_refined, tgt_refined);
    SimilarityMatrix::new(softmax_rows(&logits))
}

fn similarity_logits(src: &DenseArray, tgt: &DenseArray) -> DenseArray {
    let (n, f) = (src.rows(), src.cols());
    let m = tgt.rows();
    let scale = 1.0 / (f as f64).sqrt();
    let mut logits = DenseArray::zeros(&[n, m]);
    for i in 0..n {
        let si = src.row(i);
        let lrow = logits.row_mut(i);
        for j in 0..m {
            let tj = tgt.row(j);
            let mut d2 = 0.0;
            for d in 0..f {
                let diff = si[d] - tj[d];
                d2 += diff * diff;
            }
            lrow[j] = -d2 * scale;
        }
    }
    logits
}

/// Backward through [`similarity_matrix`]: given `dL/dsim`, returns
/// gradients with respect to the refined source and target features.
pub fn similarity_matrix_backward(
    src_refined: &DenseArray,
    tgt_refined: &DenseArray,
    sim: &SimilarityMatrix,
    grad_sim: &DenseArray,
) -> (DenseArray, DenseArray) {
    let (n, f) = (src_refined.rows(), src_refined.cols());
    let m = tgt_refined.rows();
    let scale = 1.0 / (f as f64).sqrt();
    let grad_logits = softmax_rows_backward(sim.as_array(), grad_sim);
    let mut grad_src = DenseArray::zeros(&[n, f]);
    let mut grad_tgt = DenseArray::zeros(&[m, f]);
    for i in 0..n {
        let si = src_refined.row(i);
        let glrow = grad_logits.row(i);
        for j in 0..m {
            let gl = glrow[j];
            if gl == 0.0 {
                continue;
            }
            let tj = tgt_refined.row(j);
            let gs = grad_src.row_mut(i);
            for d in 0..f {
                gs[d] += -2.0 * scale * (si[d] - tj[d]) * gl;
            }
            let gt = grad_tgt.row_mut(j);
            for d in 0..f {
                gt[d] += 2.0 * scale * (si[d] - tj[d]) * gl;
            }
        }
    }
    (grad_src, grad_tgt)
}

// ---------------------------------------------------------------------------
// Significance map and losses
// ---------------------------------------------------------------------------

/// Per-source-point registration significance: the sum of the 5 largest
/// entries of each similarity row (the whole row when the target has fewer
/// than 5 points). Values are in `(0, 1]` for a row-stochastic matrix.
pub fn significance_map_r(sim: &SimilarityMatrix) -> Vec<f64> {
    let take = sim.n_tgt().min(5);
    (0..sim.n_src())
        .map(|i| {
            let mut row = sim.row(i).to_vec();
            row.sort_unstable_by(|a, b| b.total_cmp(a));
            row[..take].iter().sum()
        })
        .collect()
}

/// Registration loss: mean Euclidean distance between the two transforms'
/// images of the cloud, `(1/N) sum ||(R_gt p + t_gt) - (R_pred p + t_pred)||`.
pub fn loss_lr(src: &PointCloud, t_gt: &RigidTransform, t_pred: &RigidTransform) -> f64 {
    let total: f64 = src
        .iter()
        .map(|&p| t_gt.apply_point(p).dist(t_pred.apply_point(p)))
        .sum();
    total / src.len() as f64
}

/// Differentiable registration loss for training: the predicted registered
/// cloud is the similarity-weighted target (`y_i = sum_j sim_ij tgt_j`) and
/// the loss is its mean distance to the ground-truth registration. Returns
/// the loss and its gradient with respect to the similarity entries, so
/// gradients reach the features without passing through RANSAC.
pub fn loss_lr_soft(
    src: &PointCloud,
    tgt: &PointCloud,
    sim: &SimilarityMatrix,
    t_gt: &RigidTransform,
) -> (f64, DenseArray) {
    let n = src.len();
    let m = tgt.len();
    let inv_n = 1.0 / n as f64;
    let mut grad_sim = DenseArray::zeros(&[n, m]);
    let mut loss = 0.0;
    for i in 0..n {
        let target_point = t_gt.apply_point(src.point(i)).to_vector();
        let mut soft = Vector3::zeros();
        let row = sim.row(i);
        for (j, &s) in row.iter().enumerate() {
            soft += s * tgt.point(j).to_vector();
        }
        let diff = soft - target_point;
        let dist = diff.norm();
        loss += dist * inv_n;
        if dist > 1e-12 {
            let dsoft = diff * (inv_n / dist);
            let grow = grad_sim.row_mut(i);
            for j in 0..m {
                grow[j] = dsoft.dot(&tgt.point(j).to_vector());
            }
        }
    }
    (loss, grad_sim)
}

// ---------------------------------------------------------------------------
// RANSAC and closest-point refinement
// ---------------------------------------------------------------------------

fn argmax_row(row: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_j = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            best_j = j;
        }
    }
    best_j
}

/// Draw one index with probability proportional to the score prefix sums.
fn weighted_draw(cumulative: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..total);
    match cumulative.binary_search_by(|probe| probe.total_cmp(&u)) {
        Ok(idx) => idx + 1,
        Err(idx) => idx,
    }
    .min(cumulative.len() - 1)
}

/// Estimate the rigid transform aligning `src` onto `tgt` from a similarity
/// matrix: hard correspondences are the per-row argmax, minimal sets of 3
/// are drawn with probability proportional to their similarity score, each
/// is fit with the closed-form solver and scored by inlier count, and the
/// best consensus set is refit. Deterministic given the rng.
pub fn ransac_align(
    src: &PointCloud,
    tgt: &PointCloud,
    sim: SimilarityMatrix,
    cfg: &RansacConfig,
    rng: &mut impl Rng,
) -> Result<RegistrationResult> {
    let n = src.len();
    if sim.n_src() != n || sim.n_tgt() != tgt.len() {
        return Err(Error::ShapeMismatch {
            layer: "ransac_align".to_string(),
            expected: vec![n, tgt.len()],
            actual: vec![sim.n_src(), sim.n_tgt()],
        });
    }
    if n < 3 {
        return Err(Error::RegistrationFailed { inliers: n });
    }
    let tau = cfg
        .inlier_tau
        .unwrap_or_else(|| 0.05 * src.bbox_diagonal())
        .max(1e-12);

    // Hard correspondences with their scores.
    let corr: Vec<usize> = (0..n).map(|i| argmax_row(sim.row(i))).collect();
    let scores: Vec<f64> = (0..n).map(|i| sim.row(i)[corr[i]]).collect();
    let mut cumulative = Vec::with_capacity(n);
    let mut total = 0.0;
    for &s in &scores {
        total += s;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::RegistrationFailed { inliers: 0 });
    }

    let count_inliers = |t: &RigidTransform| -> usize {
        (0..n)
            .filter(|&i| t.apply_point(src.point(i)).dist(tgt.point(corr[i])) <= tau)
            .count()
    };

    let mut best: Option<(usize, RigidTransform)> = None;
    for _ in 0..cfg.iters {
        // Three distinct correspondence indices, similarity-weighted.
        let mut picks: Vec<usize> = Vec::with_capacity(3);
        for _ in 0..64 {
            let idx = weighted_draw(&cumulative, total, rng);
            if !picks.contains(&idx) {
                picks.push(idx);
                if picks.len() == 3 {
                    break;
                }
            }
        }
        if picks.len() < 3 {
            continue;
        }
        let sample_src = src.subset(&picks)?;
        let sample_tgt = tgt.subset(&picks.iter().map(|&i| corr[i]).collect::<Vec<_>>())?;
        let Ok(candidate) = kabsch(&sample_src, &sample_tgt) else {
            continue;
        };
        let inliers = count_inliers(&candidate);
        if best.as_ref().is_none_or(|(bc, _)| inliers > *bc) {
            best = Some((inliers, candidate));
        }
    }

    let (best_count, best_transform) = best.ok_or(Error::RegistrationFailed { inliers: 0 })?;
    let min_consensus = 3.max((cfg.min_inlier_fraction * n as f64).ceil() as usize);
    if best_count < min_consensus {
        return Err(Error::RegistrationFailed { inliers: best_count });
    }

    // Refit on the full consensus set.
    let inlier_idx: Vec<usize> = (0..n)
        .filter(|&i| {
            best_transform
                .apply_point(src.point(i))
                .dist(tgt.point(corr[i]))
                <= tau
        })
        .collect();
    let refit_src = src.subset(&inlier_idx)?;
    let refit_tgt = tgt.subset(&inlier_idx.iter().map(|&i| corr[i]).collect::<Vec<_>>())?;
    let transform = kabsch(&refit_src, &refit_tgt).unwrap_or(best_transform);

    let mut inlier_flags = Vec::with_capacity(n);
    let mut residual = 0.0;
    for i in 0..n {
        let d = transform.apply_point(src.point(i)).dist(tgt.point(corr[i]));
        inlier_flags.push(d <= tau);
        residual += d;
    }
    residual /= n as f64;

    let significance = significance_map_r(&sim);
    Ok(RegistrationResult {
        transform,
        similarity: sim,
        significance,
        inlier_flags,
        residual,
    })
}

/// Trimmed closest-point refinement of an initial transform: repeatedly
/// match transformed source points to their nearest target point, drop the
/// worst `trim` fraction, and refit. The classical baseline refinement.
pub fn icp_refine(
    src: &PointCloud,
    tgt: &PointCloud,
    init: &RigidTransform,
    iters: usize,
    trim: f64,
) -> RigidTransform {
    let n = src.len();
    let keep = (((1.0 - trim.clamp(0.0, 0.9)) * n as f64).ceil() as usize).clamp(3.min(n), n);
    let mut current = init.clone();
    for _ in 0..iters {
        let moved = apply_transform(src, &current);
        // Pair each source point with its nearest target point.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
        for (i, &p) in moved.iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, &q) in tgt.iter().enumerate() {
                let d2 = p.dist2(q);
                if d2 < best {
                    best = d2;
                    best_j = j;
                }
            }
            pairs.push((best, i, best_j));
        }
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs.truncate(keep);
        let src_kept: Vec<Point3> = pairs.iter().map(|&(_, i, _)| src.point(i)).collect();
        let tgt_kept: Vec<Point3> = pairs.iter().map(|&(_, _, j)| tgt.point(j)).collect();
        let (Ok(a), Ok(b)) = (PointCloud::new(src_kept), PointCloud::new(tgt_kept)) else {
            break;
        };
        let Ok(next) = kabsch(&a, &b) else {
            break;
        };
        let delta_rot = crate::geometry::rotation_error_deg(current.rotation(), next.rotation());
        let delta_t = (current.translation() - next.translation()).norm();
        current = next;
        if delta_rot < 1e-10 && delta_t < 1e-12 {
            break;
        }
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error_deg, translation_error};
    use crate::nn::{max_param_rel_err, GRAD_CHECK_STEP};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::from_xyz(&pts).unwrap()
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        RigidTransform::new(
            q.to_rotation_matrix().into_inner(),
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
        )
        .unwrap()
    }

    /// One-hot similarity matrix realizing a known correspondence.
    fn permutation_sim(corr: &[usize], n_tgt: usize) -> SimilarityMatrix {
        let mut data = DenseArray::zeros(&[corr.len(), n_tgt]);
        for (i, &j) in corr.iter().enumerate() {
            data.row_mut(i)[j] = 1.0;
        }
        SimilarityMatrix::new(data).unwrap()
    }

    #[test]
    fn similarity_dominant_match_concentrates() {
        let f = 4;
        let mut src = DenseArray::zeros(&[1, f]);
        src.row_mut(0).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mut tgt = DenseArray::zeros(&[3, f]);
        tgt.row_mut(0).copy_from_slice(&[10.0, -3.0, 8.0, 0.0]);
        tgt.row_mut(1).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]); // exact match
        tgt.row_mut(2).copy_from_slice(&[-5.0, 7.0, 0.0, 9.0]);
        let sim = similarity_matrix(&src, &tgt).unwrap();
        assert!(sim.row(0)[1] >= 0.99, "row: {:?}", sim.row(0));
    }

    #[test]
    fn similarity_identical_features_uniform() {
        let src = DenseArray::zeros(&[3, 5]);
        let tgt = DenseArray::zeros(&[4, 5]);
        let sim = similarity_matrix(&src, &tgt).unwrap();
        for i in 0..3 {
            for &v in sim.row(i) {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_matches_exp_normalize_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let src = DenseArray::randn(&[6, 8], 1.0, &mut rng);
        let tgt = DenseArray::randn(&[5, 8], 1.0, &mut rng);
        let sim = similarity_matrix(&src, &tgt).unwrap();
        let scale = 1.0 / (8f64).sqrt();
        for i in 0..6 {
            let mut exps = Vec::new();
            for j in 0..5 {
                let mut d2 = 0.0;
                for d in 0..8 {
                    let diff = src.row(i)[d] - tgt.row(j)[d];
                    d2 += diff * diff;
                }
                exps.push((-d2 * scale).exp());
            }
            let total: f64 = exps.iter().sum();
            for j in 0..5 {
                assert!((sim.row(i)[j] - exps[j] / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn significance_known_rows() {
        // One-hot row sums to 1.
        let one_hot = permutation_sim(&[2], 6);
        assert!((significance_map_r(&one_hot)[0] - 1.0).abs() < 1e-15);

        // Uniform row of length 8: top-5 mass is 5/8.
        let uniform =
            SimilarityMatrix::new(DenseArray::from_vec(&[1, 8], vec![0.125; 8]).unwrap()).unwrap();
        assert!((significance_map_r(&uniform)[0] - 5.0 / 8.0).abs() < 1e-12);

        // Short rows (fewer than 5 targets) sum the whole row.
        let short =
            SimilarityMatrix::new(DenseArray::from_vec(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap())
                .unwrap();
        assert!((significance_map_r(&short)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn significance_matches_sort_oracle_and_column_permutation() {
        let mut rng = StdRng::seed_from_u64(11);
        let logits = DenseArray::randn(&[10, 9], 1.0, &mut rng);
        let sim = SimilarityMatrix::new(softmax_rows(&logits)).unwrap();
        let map = significance_map_r(&sim);
        for i in 0..10 {
            let mut row = sim.row(i).to_vec();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let oracle: f64 = row[..5].iter().sum();
            assert!((map[i] - oracle).abs() < 1e-12);
            assert!(map[i] > 0.0 && map[i] <= 1.0 + 1e-12);
        }

        // Permuting target columns must not change the map.
        let mut permuted = DenseArray::zeros(&[10, 9]);
        for i in 0..10 {
            for j in 0..9 {
                permuted.row_mut(i)[(j + 4) % 9] = sim.row(i)[j];
            }
        }
        let sim_p = SimilarityMatrix::new(permuted).unwrap();
        let map_p = significance_map_r(&sim_p);
        for (a, b) in map.iter().zip(&map_p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_lr_examples() {
        let mut rng = StdRng::seed_from_u64(13);
        let cloud = random_cloud(&mut rng, 20);
        let t = random_transform(&mut rng);
        assert_eq!(loss_lr(&cloud, &t, &t), 0.0);

        // Pure translation mismatch of length d gives exactly d.
        let a = RigidTransform::identity();
        let b = RigidTransform::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(0.3, -0.4, 1.2),
        )
        .unwrap();
        let d = b.translation().norm();
        assert!((loss_lr(&cloud, &a, &b) - d).abs() < 1e-12);

        // Random pair against a per-point oracle.
        let t2 = random_transform(&mut rng);
        let oracle: f64 = cloud
            .iter()
            .map(|&p| (t.apply_point(p).to_vector() - t2.apply_point(p).to_vector()).norm())
            .sum::<f64>()
            / cloud.len() as f64;
        assert!((loss_lr(&cloud, &t, &t2) - oracle).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_zero_on_exact_correspondence() {
        let mut rng = StdRng::seed_from_u64(17);
        let src = random_cloud(&mut rng, 12);
        let t = random_transform(&mut rng);
        let tgt = apply_transform(&src, &t);
        let sim = permutation_sim(&(0..12).collect::<Vec<_>>(), 12);
        let (loss, grad) = loss_lr_soft(&src, &tgt, &sim, &t);
        assert!(loss < 1e-12, "loss {loss}");
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    /// Raw soft loss on unnormalized entries (test oracle only).
    fn loss_soft_raw(
        src: &PointCloud,
        tgt: &PointCloud,
        entries: &DenseArray,
        t_gt: &RigidTransform,
    ) -> f64 {
        let mut loss = 0.0;
        for i in 0..src.len() {
            let mut soft = Vector3::zeros();
            for j in 0..tgt.len() {
                soft += entries.row(i)[j] * tgt.point(j).to_vector();
            }
            loss += (soft - t_gt.apply_point(src.point(i)).to_vector()).norm();
        }
        loss / src.len() as f64
    }

    #[test]
    fn soft_loss_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(19);
        let src = random_cloud(&mut rng, 6);
        let tgt = random_cloud(&mut rng, 7);
        let t = random_transform(&mut rng);
        let logits = DenseArray::randn(&[6, 7], 0.5, &mut rng);
        let probs = softmax_rows(&logits);
        let sim = SimilarityMatrix::new(probs.clone()).unwrap();
        let (_, grad_sim) = loss_lr_soft(&src, &tgt, &sim, &t);

        let mut entries = probs.clone();
        let h = 1e-6;
        for idx in 0..entries.len() {
            let orig = entries.as_slice()[idx];
            entries.as_mut_slice()[idx] = orig + h;
            let plus = loss_soft_raw(&src, &tgt, &entries, &t);
            entries.as_mut_slice()[idx] = orig - h;
            let minus = loss_soft_raw(&src, &tgt, &entries, &t);
            entries.as_mut_slice()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = grad_sim.as_slice()[idx];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-3,
                "entry {idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn ransac_exact_permutation_recovers_transform() {
        let mut rng = StdRng::seed_from_u64(23);
        let src = random_cloud(&mut rng, 64);
        let t_true = random_transform(&mut rng);
        // Permute the target ordering so correspondence is nontrivial.
        let mut perm: Vec<usize> = (0..64).collect();
        perm.rotate_left(17);
        let tgt_pts: Vec<Point3> = perm
            .iter()
            .map(|&j| t_true.apply_point(src.point(j)))
            .collect();
        let tgt = PointCloud::new(tgt_pts).unwrap();
        // src[i] corresponds to the tgt position holding index i.
        let corr: Vec<usize> = (0..64)
            .map(|i| perm.iter().position(|&p| p == i).unwrap())
            .collect();
        let sim = permutation_sim(&corr, 64);
        let result = ransac_align(&src, &tgt, sim, &RansacConfig::default(), &mut rng).unwrap();
        assert!(rotation_error_deg(t_true.rotation(), result.transform.rotation()) < 1e-6);
        assert!(translation_error(t_true.translation(), result.transform.translation()) < 1e-9);
        assert!(result.residual < 1e-9);
        assert!(result.inlier_flags.iter().all(|&f| f));
        // In the exact case the residual equals the registration loss.
        let l = loss_lr(&src, &t_true, &result.transform);
        assert!((result.residual - l).abs() < 1e-9);
    }

    #[test]
    fn ransac_tolerates_thirty_percent_wrong() {
        let mut rng = StdRng::seed_from_u64(29);
        let mut good = 0;
        for trial in 0..10 {
            let mut trial_rng = StdRng::seed_from_u64(1000 + trial);
            let src = random_cloud(&mut trial_rng, 100);
            let t_true = random_transform(&mut trial_rng);
            let tgt = apply_transform(&src, &t_true);
            // 70% correct, 30% uniformly wrong.
            let corr: Vec<usize> = (0..100)
                .map(|i| {
                    if trial_rng.gen_bool(0.7) {
                        i
                    } else {
                        trial_rng.gen_range(0..100)
                    }
                })
                .collect();
            let sim = permutation_sim(&corr, 100);
            let result =
                ransac_align(&src, &tgt, sim, &RansacConfig::default(), &mut rng).unwrap();
            if rotation_error_deg(t_true.rotation(), result.transform.rotation()) < 0.5
                && translation_error(t_true.translation(), result.transform.translation()) < 0.005
            {
                good += 1;
            }
        }
        assert!(good >= 9, "only {good}/10 trials recovered the transform");
    }

    #[test]
    fn ransac_never_silently_accepts_garbage() {
        let mut rng = StdRng::seed_from_u64(31);
        let src = random_cloud(&mut rng, 60);
        let t_true = random_transform(&mut rng);
        let tgt = apply_transform(&src, &t_true);
        // Entirely wrong correspondences (a fixed shift).
        let corr: Vec<usize> = (0..60).map(|i| (i + 31) % 60).collect();
        let sim = permutation_sim(&corr, 60);
        let cfg = RansacConfig::default();
        let tau = 0.05 * src.bbox_diagonal();
        match ransac_align(&src, &tgt, sim, &cfg, &mut rng) {
            Err(Error::RegistrationFailed { .. }) => {}
            Ok(result) => {
                assert!(
                    result.residual > 10.0 * tau,
                    "confident residual {} under garbage correspondences",
                    result.residual
                );
            }
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ransac_source_frame_consistency() {
        // Aligning (T0(src), tgt) then composing with T0 matches aligning
        // (src, tgt) when correspondences are exact.
        let mut rng = StdRng::seed_from_u64(37);
        let src = random_cloud(&mut rng, 40);
        let t_true = random_transform(&mut rng);
        let tgt = apply_transform(&src, &t_true);
        let ident: Vec<usize> = (0..40).collect();

        let direct = ransac_align(
            &src,
            &tgt,
            permutation_sim(&ident, 40),
            &RansacConfig::default(),
            &mut StdRng::seed_from_u64(99),
        )
        .unwrap();

        let t0 = random_transform(&mut rng);
        let moved = apply_transform(&src, &t0);
        let from_moved = ransac_align(
            &moved,
            &tgt,
            permutation_sim(&ident, 40),
            &RansacConfig::default(),
            &mut StdRng::seed_from_u64(99),
        )
        .unwrap();
        let composed = from_moved.transform.compose(&t0);
        assert!(rotation_error_deg(direct.transform.rotation(), composed.rotation()) < 1e-6);
        assert!(
            translation_error(direct.transform.translation(), composed.translation()) < 1e-6
        );
    }

    #[test]
    fn icp_refines_a_perturbed_transform() {
        let mut rng = StdRng::seed_from_u64(41);
        let src = random_cloud(&mut rng, 80);
        let t_true = random_transform(&mut rng);
        let tgt = apply_transform(&src, &t_true);
        // Perturb the truth slightly and let the refinement pull it back.
        let nudge =
            RigidTransform::from_axis_angle(Vector3::z(), 0.02, Vector3::new(0.01, 0.0, 0.0))
                .unwrap();
        let init = nudge.compose(&t_true);
        let refined = icp_refine(&src, &tgt, &init, 20, 0.1);
        assert!(rotation_error_deg(t_true.rotation(), refined.rotation()) < 1e-6);
        assert!(translation_error(t_true.translation(), refined.translation()) < 1e-9);
    }

    // -- attention ----------------------------------------------------------

    fn attention_fixture(
        rng: &mut impl Rng,
        n: usize,
        f: usize,
    ) -> (ParameterStore, CrossAttention, PointCloud, DenseArray, DenseArray) {
        let mut store = ParameterStore::new();
        let att = CrossAttention::new(&mut store, vec![3, 5], f, rng);
        let cloud = random_cloud(rng, n);
        let feats = DenseArray::randn(&[n, f], 1.0, rng);
        let global = DenseArray::randn(&[1, f], 1.0, rng);
        (store, att, cloud, feats, global)
    }

    #[test]
    fn attention_all_ones_equals_plain_softmax_oracle() {
        let mut rng = StdRng::seed_from_u64(43);
        let (store, att, cloud, feats, global) = attention_fixture(&mut rng, 12, 6);
        let ones = vec![1.0; 12];
        let (_, cache) = att.forward(&store, &cloud, &feats, &global, &ones).unwrap();

        // Oracle: plain softmax over independently recomputed logits.
        let f = 6usize;
        let scale = 1.0 / (f as f64).sqrt();
        let q = store.value("pcr.h0.q.w");
        let qb = store.value("pcr.h0.q.b");
        let k = store.value("pcr.h0.k.w");
        let kb = store.value("pcr.h0.k.b");
        let nbrs = knn(&cloud, &cloud, 3).unwrap();
        for i in 0..12 {
            let mut logits = DenseArray::zeros(&[1, 3]);
            for (pos, &j) in nbrs.neighbors(i).iter().enumerate() {
                let mut dot = 0.0;
                for a in 0..f {
                    let mut qa = qb.as_slice()[a];
                    let mut ka = kb.as_slice()[a];
                    for b in 0..f {
                        qa += feats.row(i)[b] * q.row(b)[a];
                        ka += feats.row(j)[b] * k.row(b)[a];
                    }
                    dot += qa * ka;
                }
                logits.row_mut(0)[pos] = dot * scale;
            }
            let oracle = softmax_rows(&logits);
            for pos in 0..3 {
                let got = cache.kernel_probs(0).row(i)[pos];
                let want = oracle.row(0)[pos];
                assert!(
                    (got - want).abs() < 1e-9,
                    "point {i} pos {pos}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn attention_zero_weight_removes_contribution() {
        let mut rng = StdRng::seed_from_u64(47);
        let (store, att, cloud, feats, global) = attention_fixture(&mut rng, 10, 4);
        let mut weights = vec![1.0; 10];
        weights[4] = 0.0;
        let (_, cache) = att
            .forward(&store, &cloud, &feats, &global, &weights)
            .unwrap();
        for hi in 0..2 {
            let nbrs = knn(&cloud, &cloud, [3, 5][hi]).unwrap();
            for i in 0..10 {
                for (pos, &j) in nbrs.neighbors(i).iter().enumerate() {
                    if j == 4 {
                        assert_eq!(
                            cache.kernel_probs(hi).row(i)[pos],
                            0.0,
                            "weighted-out point still contributes"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn attention_rejects_oversized_horizon() {
        let mut rng = StdRng::seed_from_u64(53);
        let mut store = ParameterStore::new();
        let att = CrossAttention::new(&mut store, vec![8], 4, &mut rng);
        let cloud = random_cloud(&mut rng, 5);
        let feats = DenseArray::zeros(&[5, 4]);
        let global = DenseArray::zeros(&[1, 4]);
        assert!(att
            .forward(&store, &cloud, &feats, &global, &[1.0; 5])
            .is_err());
    }

    #[test]
    fn attention_gradient_check() {
        let mut rng = StdRng::seed_from_u64(59);
        let (mut store, att, cloud, feats, global) = attention_fixture(&mut rng, 9, 5);
        let weights: Vec<f64> = (0..9).map(|i| 0.2 + 0.08 * i as f64).collect();
        let coeffs = DenseArray::randn(&[9, 5], 1.0, &mut rng);

        let loss_fn = |s: &ParameterStore| {
            let (out, _) = att.forward(s, &cloud, &feats, &global, &weights).unwrap();
            out.as_slice()
                .iter()
                .zip(coeffs.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let (_, cache) = att.forward(&store, &cloud, &feats, &global, &weights).unwrap();
        store.zero_grads();
        let (grad_feats, grad_global) = att.backward(&mut store, &cache, &coeffs);

        for name in [
            "pcr.h0.q.w",
            "pcr.h0.k.w",
            "pcr.h0.v.w",
            "pcr.h1.q.w",
            "pcr.h1.v.b",
            "pcr.proj.w",
            "pcr.mask_q.w",
            "pcr.mask_k.w",
        ] {
            let analytic = store.grad(name).clone();
            let err = max_param_rel_err(
                &mut store,
                name,
                &analytic,
                loss_fn,
                GRAD_CHECK_STEP,
                Some(10),
                &mut rng,
            );
            assert!(err < 1e-3, "{name}: gradient error {err}");
        }

        // Input feature and global gradients.
        let mut feats_var = feats.clone();
        let err_feats = crate::nn::max_input_rel_err(
            &mut feats_var,
            &grad_feats,
            |fv| {
                let (out, _) = att.forward(&store, &cloud, fv, &global, &weights).unwrap();
                out.as_slice()
                    .iter()
                    .zip(coeffs.as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            },
            GRAD_CHECK_STEP,
            Some(15),
            &mut rng,
        );
        assert!(err_feats < 1e-3, "input feature gradient error {err_feats}");

        let mut global_var = global.clone();
        let err_global = crate::nn::max_input_rel_err(
            &mut global_var,
            &grad_global,
            |gv| {
                let (out, _) = att.forward(&store, &cloud, &feats, gv, &weights).unwrap();
                out.as_slice()
                    .iter()
                    .zip(coeffs.as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            },
            GRAD_CHECK_STEP,
            None,
            &mut rng,
        );
        assert!(err_global < 1e-3, "global gradient error {err_global}");
    }

    #[test]
    fn similarity_backward_gradient_check() {
        let mut rng = StdRng::seed_from_u64(61);
        let src = DenseArray::randn(&[5, 4], 1.0, &mut rng);
        let tgt = DenseArray::randn(&[6, 4], 1.0, &mut rng);
        let coeffs = DenseArray::randn(&[5, 6], 1.0, &mut rng);

        let sim = similarity_matrix(&src, &tgt).unwrap();
        let (grad_src, grad_tgt) = similarity_matrix_backward(&src, &tgt, &sim, &coeffs);

        let weighted = |s: &DenseArray, t: &DenseArray| {
            let sm = similarity_matrix(s, t).unwrap();
            sm.as_array()
                .as_slice()
                .iter()
                .zip(coeffs.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let mut src_var = src.clone();
        let err_src = crate::nn::max_input_rel_err(
            &mut src_var,
            &grad_src,
            |sv| weighted(sv, &tgt),
            GRAD_CHECK_STEP,
            None,
            &mut rng,
        );
        assert!(err_src < 1e-3, "src gradient error {err_src}");

        let mut tgt_var = tgt.clone();
        let err_tgt = crate::nn::max_input_rel_err(
            &mut tgt_var,
            &grad_tgt,
            |tv| weighted(&src, tv),
            GRAD_CHECK_STEP,
            None,
            &mut rng,
        );
        assert!(err_tgt < 1e-3, "tgt gradient error {err_tgt}");
    }
}
