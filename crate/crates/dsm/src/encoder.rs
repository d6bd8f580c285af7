//! Feature-distribution encoder.
//!
//! Two kNN set-abstraction stages (shared point MLP + max-pool) produce a
//! per-point feature column; variational heads turn it into a point-wise
//! diagonal-Gaussian distribution (mean, log-variance per point) and, after
//! a global max-pool and a small MLP, a single global distribution. The
//! point-wise means are what the attention modules consume; the variances
//! feed the neighborhood distribution map.

use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};
use crate::nn::{
    maxpool_rows, maxpool_rows_backward, maxpool_segments, maxpool_segments_backward,
    reparameterize, tanh_backward, tanh_forward, DenseArray, Linear, LinearInit, ParameterStore,
    LOGVAR_CLAMP,
};
use rand::Rng;

/// Whether a distribution describes one global latent or one latent per
/// point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScope {
    Global,
    PointWise,
}

/// A diagonal-Gaussian latent: `mean` and `logvar` of identical shape —
/// `1×F` for the global scope, `n×F` point-wise.
#[derive(Debug, Clone)]
pub struct FeatureDistribution {
    pub mean: DenseArray,
    pub logvar: DenseArray,
    pub scope: FeatureScope,
}

impl FeatureDistribution {
    pub fn new(mean: DenseArray, logvar: DenseArray, scope: FeatureScope) -> Result<Self> {
        if mean.shape() != logvar.shape() {
            return Err(Error::ShapeMismatch {
                layer: "FeatureDistribution".to_string(),
                expected: mean.shape().to_vec(),
                actual: logvar.shape().to_vec(),
            });
        }
        if scope == FeatureScope::Global && mean.rows() != 1 {
            return Err(Error::invalid("global distribution must have one row"));
        }
        Ok(FeatureDistribution {
            mean,
            logvar,
            scope,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn num_points(&self) -> usize {
        self.mean.rows()
    }
}

/// Sizing of the encoder stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// kNN group sizes of the two set-abstraction stages.
    pub groups: [usize; 2],
    /// Hidden widths of the two stages.
    pub widths: [usize; 2],
    /// Output feature width of all four heads.
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            groups: [8, 16],
            widths: [32, 64],
            feature_dim: 64,
        }
    }
}

/// The encoder layers; parameters live in the store under `enc.*`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stage1: Linear,
    stage2: Linear,
    local_mu: Linear,
    local_logvar: Linear,
    global_hidden: Linear,
    global_mu: Linear,
    global_logvar: Linear,
}

/// Cached activations of one encode pass, consumed by
/// [`Encoder::backward`].
pub struct EncodeCache {
    n: usize,
    rel1: DenseArray,
    act1: DenseArray,
    argmax1: Vec<usize>,
    stage2_in: DenseArray,
    neighbors2: Vec<usize>,
    act2: DenseArray,
    argmax2: Vec<usize>,
    pooled: DenseArray,
    argmax_global: Vec<usize>,
    global_in: DenseArray,
    global_act: DenseArray,
    local_logvar_pre: DenseArray,
    global_logvar_pre: DenseArray,
}

/// Gradients flowing back into an encode pass, one slot per output. Use
/// [`EncodeGrads::zeros_like`] and fill what the loss touches.
pub struct EncodeGrads {
    pub local_mu: DenseArray,
    pub local_logvar: DenseArray,
    pub global_mu: DenseArray,
    pub global_logvar: DenseArray,
}

impl EncodeGrads {
    pub fn zeros_like(local: &FeatureDistribution, global: &FeatureDistribution) -> Self {
        EncodeGrads {
            local_mu: DenseArray::zeros(local.mean.shape()),
            local_logvar: DenseArray::zeros(local.logvar.shape()),
            global_mu: DenseArray::zeros(global.mean.shape()),
            global_logvar: DenseArray::zeros(global.logvar.shape()),
        }
    }
}

fn clamp_forward(pre: &DenseArray) -> DenseArray {
    pre.map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
}

fn clamp_backward(pre: &DenseArray, grad: &DenseArray) -> DenseArray {
    let data = pre
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(&p, &g)| if p.abs() < LOGVAR_CLAMP { g } else { 0.0 })
        .collect();
    DenseArray::from_vec(pre.shape(), data).unwrap()
}

impl Encoder {
    pub fn new(store: &mut ParameterStore, cfg: EncoderConfig, rng: &mut impl Rng) -> Self {
        let [w1, w2] = cfg.widths;
        let f = cfg.feature_dim;
        Encoder {
            stage1: Linear::new(store, "enc.stage1", 3, w1, LinearInit::Xavier, rng),
            stage2: Linear::new(store, "enc.stage2", 3 + w1, w2, LinearInit::Xavier, rng),
            local_mu: Linear::new(store, "enc.local_mu", w2, f, LinearInit::Xavier, rng),
            local_logvar: Linear::new(store, "enc.local_logvar", w2, f, LinearInit::Xavier, rng),
            global_hidden: Linear::new(store, "enc.global_hidden", w2, w2, LinearInit::Xavier, rng),
            global_mu: Linear::new(store, "enc.global_mu", w2, f, LinearInit::Xavier, rng),
            global_logvar: Linear::new(store, "enc.global_logvar", w2, f, LinearInit::Xavier, rng),
            cfg,
        }
    }

    /// Encode a cloud into (global, point-wise) feature distributions.
    /// Deterministic given the cloud and parameters.
    pub fn encode(
        &self,
        store: &ParameterStore,
        cloud: &PointCloud,
    ) -> Result<(FeatureDistribution, FeatureDistribution, EncodeCache)> {
        let n = cloud.len();
        let [k1, k2] = self.cfg.groups;
        let k_max = k1.max(k2);
        if n < k_max {
            return Err(Error::invalid(format!(
                "encoder needs at least {k_max} points, cloud has {n}"
            )));
        }

        // Stage 1: relative neighbor coordinates -> shared MLP -> max-pool.
        let nn1 = knn(cloud, cloud, k1)?;
        let mut rel1 = DenseArray::zeros(&[n * k1, 3]);
        for i in 0..n {
            let pi = cloud.point(i);
            for (j, &nb) in nn1.neighbors(i).iter().enumerate() {
                let pj = cloud.point(nb);
                let row = rel1.row_mut(i * k1 + j);
                row[0] = pj.x - pi.x;
                row[1] = pj.y - pi.y;
                row[2] = pj.z - pi.z;
            }
        }
        let act1 = tanh_forward(&self.stage1.forward(store, &rel1)?);
        let (f1, argmax1) = maxpool_segments(&act1, k1);

        // Stage 2: relative coordinates plus the neighbor's stage-1 feature.
        let nn2 = knn(cloud, cloud, k2)?;
        let w1 = self.cfg.widths[0];
        let mut stage2_in = DenseArray::zeros(&[n * k2, 3 + w1]);
        let mut neighbors2 = Vec::with_capacity(n * k2);
        for i in 0..n {
            let pi = cloud.point(i);
            for (j, &nb) in nn2.neighbors(i).iter().enumerate() {
                neighbors2.push(nb);
                let pj = cloud.point(nb);
                let row = stage2_in.row_mut(i * k2 + j);
                row[0] = pj.x - pi.x;
                row[1] = pj.y - pi.y;
                row[2] = pj.z - pi.z;
                row[3..3 + w1].copy_from_slice(f1.row(nb));
            }
        }
        let act2 = tanh_forward(&self.stage2.forward(store, &stage2_in)?);
        let (f2, argmax2) = maxpool_segments(&act2, k2);

        // Point-wise heads.
        let local_mu = self.local_mu.forward(store, &f2)?;
        let local_logvar_pre = self.local_logvar.forward(store, &f2)?;
        let local = FeatureDistribution::new(
            local_mu,
            clamp_forward(&local_logvar_pre),
            FeatureScope::PointWise,
        )?;

        // Global head: max-pool over all points, then a small MLP.
        let (global_in, argmax_global) = maxpool_rows(&f2);
        let global_act = tanh_forward(&self.global_hidden.forward(store, &global_in)?);
        let global_mu = self.global_mu.forward(store, &global_act)?;
        let global_logvar_pre = self.global_logvar.forward(store, &global_act)?;
        let global = FeatureDistribution::new(
            global_mu,
            clamp_forward(&global_logvar_pre),
            FeatureScope::Global,
        )?;

        let cache = EncodeCache {
            n,
            rel1,
            act1,
            argmax1,
            stage2_in,
            neighbors2,
            act2,
            argmax2,
            pooled: f2,
            argmax_global,
            global_in,
            global_act,
            local_logvar_pre,
            global_logvar_pre,
        };
        Ok((global, local, cache))
    }

    /// Backpropagate output gradients into the encoder parameters.
    pub fn backward(&self, store: &mut ParameterStore, cache: &EncodeCache, grads: &EncodeGrads) {
        let [k1, k2] = self.cfg.groups;
        let w1 = self.cfg.widths[0];
        let n = cache.n;

        // Global path back to the pooled features.
        let mut grad_global_act = self
            .global_mu
            .backward(store, &cache.global_act, &grads.global_mu);
        let g_lv = clamp_backward(&cache.global_logvar_pre, &grads.global_logvar);
        grad_global_act.add_assign(&self.global_logvar.backward(store, &cache.global_act, &g_lv));
        let grad_global_pre = tanh_backward(&cache.global_act, &grad_global_act);
        let grad_global_in = self
            .global_hidden
            .backward(store, &cache.global_in, &grad_global_pre);
        let mut grad_f2 = maxpool_rows_backward(&cache.argmax_global, n, &grad_global_in);

        // Local heads back to the pooled features.
        grad_f2.add_assign(&self.local_mu.backward(store, &cache.pooled, &grads.local_mu));
        let l_lv = clamp_backward(&cache.local_logvar_pre, &grads.local_logvar);
        grad_f2.add_assign(&self.local_logvar.backward(store, &cache.pooled, &l_lv));

        // Stage 2.
        let grad_act2 = maxpool_segments_backward(&cache.argmax2, n * k2, &grad_f2);
        let grad_pre2 = tanh_backward(&cache.act2, &grad_act2);
        let grad_stage2_in = self.stage2.backward(store, &cache.stage2_in, &grad_pre2);

        // Scatter the feature part of the stage-2 input gradient back to
        // the stage-1 outputs (coordinates carry no parameter gradient).
        let mut grad_f1 = DenseArray::zeros(&[n, w1]);
        for (row, &nb) in cache.neighbors2.iter().enumerate() {
            let src = grad_stage2_in.row(row);
            let dst = grad_f1.row_mut(nb);
            for c in 0..w1 {
                dst[c] += src[3 + c];
            }
        }

        // Stage 1.
        let grad_act1 = maxpool_segments_backward(&cache.argmax1, n * k1, &grad_f1);
        let grad_pre1 = tanh_backward(&cache.act1, &grad_act1);
        let _ = self.stage1.backward(store, &cache.rel1, &grad_pre1);
    }
}

/// Log of the standard normal normalization constant, `ln sqrt(2π)`.
const LN_SQRT_TAU: f64 = 0.918_938_533_204_672_7;

/// Per-point neighborhood distribution map: for each point, draw
/// `m_samples` feature vectors from its local distribution and sum their
/// log-density under the global diagonal Gaussian. Higher values mean the
/// neighborhood is more consistent with the global feature distribution.
///
/// Raw (unnormalized) values are returned; callers normalize per cloud
/// before using them as weights.
pub fn distribution_map(
    global: &FeatureDistribution,
    local: &FeatureDistribution,
    m_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if global.scope != FeatureScope::Global || local.scope != FeatureScope::PointWise {
        return Err(Error::invalid(
            "distribution_map needs a global and a point-wise distribution",
        ));
    }
    if m_samples == 0 {
        return Err(Error::invalid("distribution_map needs m_samples >= 1"));
    }
    if global.feature_dim() != local.feature_dim() {
        return Err(Error::ShapeMismatch {
            layer: "distribution_map".to_string(),
            expected: vec![global.feature_dim()],
            actual: vec![local.feature_dim()],
        });
    }
    let f = global.feature_dim();
    let mu = global.mean.row(0);
    let logvar = global.logvar.row(0);
    let n = local.num_points();
    let mut map = Vec::with_capacity(n);
    for i in 0..n {
        let point_mu = DenseArray::from_vec(&[1, f], local.mean.row(i).to_vec())?;
        let point_lv = DenseArray::from_vec(&[1, f], local.logvar.row(i).to_vec())?;
        let mut score = 0.0;
        for _ in 0..m_samples {
            let draw = reparameterize(&point_mu, &point_lv, rng);
            for d in 0..f {
                let a = draw.as_slice()[d];
                let var = logvar[d].exp();
                score += -(a - mu[d]) * (a - mu[d]) / (2.0 * var) - logvar[d] / 2.0 - LN_SQRT_TAU;
            }
        }
        map.push(score);
    }
    Ok(map)
}

/// Mean KL divergence to the standard normal over the distribution's rows:
/// `KL(N(mu, sigma^2) || N(0, I)) = 1/2 Σ (mu^2 + sigma^2 - logvar - 1)`.
pub fn kl_to_standard_normal(dist: &FeatureDistribution) -> f64 {
    let rows = dist.num_points() as f64;
    let mut total = 0.0;
    for (m, lv) in dist.mean.as_slice().iter().zip(dist.logvar.as_slice()) {
        total += 0.5 * (m * m + lv.exp() - lv - 1.0);
    }
    total / rows
}

/// Gradient of `weight * kl_to_standard_normal` with respect to the mean
/// and log-variance arrays.
pub fn kl_backward(dist: &FeatureDistribution, weight: f64) -> (DenseArray, DenseArray) {
    let rows = dist.num_points() as f64;
    let scale = weight / rows;
    let grad_mu = dist.mean.map(|m| scale * m);
    let grad_lv = dist.logvar.map(|lv| scale * 0.5 * (lv.exp() - 1.0));
    (grad_mu, grad_lv)
}
