//! Weighted scaled-dot-product attention over per-point neighbor lists.
//! Shared by the registration cross-attention and the sampling
//! self-attention (which passes full index lists).

use super::{DenseArray, Linear, ParameterStore};
use crate::error::Result;
use crate::geometry::NeighborIndex;

/// Cache of one weighted neighborhood attention pass.
pub(crate) struct AttentionCache {
    q: DenseArray,
    k: DenseArray,
    v: DenseArray,
    /// Attention probabilities, `n×h` aligned with the neighbor lists.
    pub(crate) probs: DenseArray,
    x: DenseArray,
}

/// Scaled dot-product attention over per-point neighbor lists, with
/// incoming per-point weights folded into the normalization:
/// `p_ij = w_j exp(l_ij - max_i) / sum_j w_j exp(l_ij - max_i)`.
///
/// With all-ones weights this is exactly plain softmax attention (the
/// weight multiplications are by the literal 1.0), which is what makes the
/// first pipeline cycle bit-identical to the unweighted modules. A zero
/// weight removes that point's contribution entirely.
pub(crate) fn neighborhood_attention_forward(
    store: &ParameterStore,
    q_layer: &Linear,
    k_layer: &Linear,
    v_layer: &Linear,
    feats: &DenseArray,
    neighbors: &NeighborIndex,
    weights: &[f64],
) -> Result<(DenseArray, AttentionCache)> {
    let n = feats.rows();
    let f = feats.cols();
    let h = neighbors.k();
    let scale = 1.0 / (f as f64).sqrt();

    let q = q_layer.forward(store, feats)?;
    let k = k_layer.forward(store, feats)?;
    let v = v_layer.forward(store, feats)?;

    let mut probs = DenseArray::zeros(&[n, h]);
    let mut out = DenseArray::zeros(&[n, f]);
    let mut logits = vec![0.0f64; h];
    for i in 0..n {
        let nbrs = neighbors.neighbors(i);
        let qi = q.row(i);
        let mut max_logit = f64::NEG_INFINITY;
        for (pos, &j) in nbrs.iter().enumerate() {
            let kj = k.row(j);
            let mut dot = 0.0;
            for d in 0..f {
                dot += qi[d] * kj[d];
            }
            let l = dot * scale;
            logits[pos] = l;
            if l > max_logit {
                max_logit = l;
            }
        }
        let mut z = 0.0;
        let prow = probs.row_mut(i);
        for (pos, &j) in nbrs.iter().enumerate() {
            let u = weights[j] * (logits[pos] - max_logit).exp();
            prow[pos] = u;
            z += u;
        }
        if z > 0.0 {
            for p in prow.iter_mut() {
                *p /= z;
            }
        } else {
            // Every neighbor weighted to zero: no contribution at all.
            for p in prow.iter_mut() {
                *p = 0.0;
            }
        }
        let orow = out.row_mut(i);
        for (pos, &j) in nbrs.iter().enumerate() {
            let p = probs.row(i)[pos];
            if p == 0.0 {
                continue;
            }
            let vj = v.row(j);
            for d in 0..f {
                orow[d] += p * vj[d];
            }
        }
    }

    let cache = AttentionCache {
        q,
        k,
        v,
        probs,
        x: feats.clone(),
    };
    Ok((out, cache))
}

/// Backward of [`neighborhood_attention_forward`]; accumulates parameter
/// gradients and returns the gradient with respect to the input features.
/// Weights are cycle constants and carry no gradient.
pub(crate) fn neighborhood_attention_backward(
    store: &mut ParameterStore,
    q_layer: &Linear,
    k_layer: &Linear,
    v_layer: &Linear,
    cache: &AttentionCache,
    neighbors: &NeighborIndex,
    grad_out: &DenseArray,
) -> DenseArray {
    let n = cache.x.rows();
    let f = cache.x.cols();
    let h = neighbors.k();
    let scale = 1.0 / (f as f64).sqrt();

    let mut grad_q = DenseArray::zeros(&[n, f]);
    let mut grad_k = DenseArray::zeros(&[n, f]);
    let mut grad_v = DenseArray::zeros(&[n, f]);
    let mut dprob = vec![0.0f64; h];
    for i in 0..n {
        let nbrs = neighbors.neighbors(i);
        let gi = grad_out.row(i);
        let prow = cache.probs.row(i);

        // dL/dp_ij and dV.
        let mut dot_dp_p = 0.0;
        for (pos, &j) in nbrs.iter().enumerate() {
            let vj = cache.v.row(j);
            let mut d = 0.0;
            for c in 0..f {
                d += gi[c] * vj[c];
            }
            dprob[pos] = d;
            dot_dp_p += d * prow[pos];
            let p = prow[pos];
            if p != 0.0 {
                let gv = grad_v.row_mut(j);
                for c in 0..f {
                    gv[c] += p * gi[c];
                }
            }
        }

        // Through the (weighted) softmax: dl_ij = p_ij (dp_ij - sum dp p).
        let qi = cache.q.row(i);
        for (pos, &j) in nbrs.iter().enumerate() {
            let dl = prow[pos] * (dprob[pos] - dot_dp_p);
            if dl == 0.0 {
                continue;
            }
            let kj = cache.k.row(j);
            let gq = grad_q.row_mut(i);
            for c in 0..f {
                gq[c] += dl * scale * kj[c];
            }
            let gk = grad_k.row_mut(j);
            for c in 0..f {
                gk[c] += dl * scale * qi[c];
            }
        }
    }

    let mut grad_x = q_layer.backward(store, &cache.x, &grad_q);
    grad_x.add_assign(&k_layer.backward(store, &cache.x, &grad_k));
    grad_x.add_assign(&v_layer.backward(store, &cache.x, &grad_v));
    grad_x
}

