//! The cyclic modeling loop: alternate registration and sampling over a
//! frame sequence, fuse the per-point weighting maps between cycles, and
//! drive alternating training of both learned paths.
//!
//! Cycle structure: the first pass merges frames sequentially (register
//! against the current model, concatenate, sample back to the budget);
//! each further cycle re-registers every frame against the current model
//! and rebuilds it. Three per-point maps over the working cloud steer the
//! attention kernels: the registration significance (top-5 similarity
//! mass), the sampling significance (distance to the supporting evidence)
//! and the neighborhood distribution consistency. The first pass starts
//! from all-ones maps, which is exactly the unweighted modules.

use crate::encoder::{
    distribution_map, kl_backward, kl_to_standard_normal, Encoder, EncoderConfig, EncodeGrads,
};
use crate::error::{Error, Result};
use crate::eval::CycleMetrics;
use crate::geometry::{apply_transform, chamfer_distance, PointCloud, RigidTransform};
use crate::io::FrameSequence;
use crate::nn::{DenseArray, ParameterStore};
use crate::pcr::{
    icp_refine, loss_lr_soft, ransac_align, similarity_matrix, similarity_matrix_backward,
    CrossAttention, RansacConfig, RegistrationResult,
};
use crate::pcs::{
    loss_ls_with_grad, significance_map_s, RegressionHead, SamplingResult, SelfAttention,
};
use crate::synth::{RgPair, SpStack};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Floor applied to fused weights so no point is ever annihilated (a
/// uniformly floored region still attends normally, since only relative
/// weights matter inside the normalization).
pub const WEIGHT_FLOOR: f64 = 0.05;

/// Every knob of a modeling or training run. All fields are explicit so a
/// serialized manifest fully describes the run; nothing is seeded or sized
/// implicitly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    /// Refinement passes after the initial sequential merge.
    pub cycles: usize,
    /// Maximum world-model size after any sampling step.
    pub budget: usize,
    /// Output fraction for standalone sampling (`n_out = ratio * n`).
    pub sample_ratio: f64,
    /// Neighborhood sizes for the registration cross-attention kernels.
    pub horizons: Vec<usize>,
    /// Resolution pyramid depth for the sampling self-attention
    /// (level `l` attends among `n >> l` points).
    pub resolution_levels: usize,
    /// Feature width of the encoder outputs and attention kernels.
    pub feature_dim: usize,
    /// Grouping sizes of the two encoder set-abstraction stages.
    pub encoder_groups: [usize; 2],
    /// Hidden widths of the two encoder stages.
    pub encoder_widths: [usize; 2],
    /// Draws per point when scoring the neighborhood distribution map.
    pub m_samples: usize,
    /// RANSAC iterations per registration.
    pub ransac_iters: usize,
    /// Absolute inlier threshold in meters; `None` derives
    /// `0.05 * source bounding-box diagonal` per pair.
    pub ransac_inlier_tau: Option<f64>,
    /// Minimum inlier fraction for a registration to count as successful.
    pub ransac_min_inlier_fraction: f64,
    /// Iterations of trimmed closest-point refinement after RANSAC
    /// (0 disables refinement).
    pub icp_refine_iters: usize,
    /// Weight of the KL-to-standard-normal regularizer on feature
    /// distributions during training (0 disables it).
    pub kl_beta: f64,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// `false` forces all-ones weighting maps every cycle (ablation mode).
    pub weighting: bool,
    /// Seed for every random draw in the run.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cycles: 3,
            budget: 4096,
            sample_ratio: 0.5,
            horizons: vec![8, 16, 32],
            resolution_levels: 3,
            feature_dim: 64,
            encoder_groups: [8, 16],
            encoder_widths: [32, 64],
            m_samples: 16,
            ransac_iters: 512,
            ransac_inlier_tau: None,
            ransac_min_inlier_fraction: 0.2,
            icp_refine_iters: 10,
            kl_beta: 1e-3,
            learning_rate: 1e-3,
            weighting: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    fn ransac(&self) -> RansacConfig {
        RansacConfig {
            iters: self.ransac_iters,
            inlier_tau: self.ransac_inlier_tau,
            min_inlier_fraction: self.ransac_min_inlier_fraction,
        }
    }
}

/// The three per-point maps over the current working cloud, each in
/// `[0, 1]`. The first cycle uses all-ones maps.
#[derive(Debug, Clone)]
pub struct WeightingMaps {
    pub r_map: Vec<f64>,
    pub s_map: Vec<f64>,
    pub d_map: Vec<f64>,
}

impl WeightingMaps {
    pub fn all_ones(n: usize) -> Self {
        WeightingMaps {
            r_map: vec![1.0; n],
            s_map: vec![1.0; n],
            d_map: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.r_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_map.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_map.len() != self.r_map.len() || self.d_map.len() != self.r_map.len() {
            return Err(Error::invalid("weighting maps must share one length"));
        }
        for map in [&self.r_map, &self.s_map, &self.d_map] {
            if map.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid("weighting map value outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Multiplicative fusion with a floor: `max(r * d * s, 0.05)` per point.
/// All-ones maps fuse to exactly 1 (first-cycle neutrality); a zero in any
/// map floors the weight instead of annihilating the point.
pub fn fuse_weights(maps: &WeightingMaps) -> Vec<f64> {
    maps.r_map
        .iter()
        .zip(&maps.d_map)
        .zip(&maps.s_map)
        .map(|((&r, &d), &s)| (r * d * s).max(WEIGHT_FLOOR))
        .collect()
}

/// Min-max normalization to `[0, 1]`; a constant map normalizes to all
/// ones (neutral).
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        return vec![1.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Max normalization to `[0, 1]` for non-negative maps; an all-zero map
/// normalizes to all ones (neutral).
pub fn normalize_by_max(values: &[f64]) -> Vec<f64> {
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > 1e-12) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|&v| (v / hi).clamp(0.0, 1.0)).collect()
}

/// The learned modules over one parameter store.
#[derive(Debug, Clone)]
pub struct Modules {
    pub encoder: Encoder,
    pub cross: CrossAttention,
    pub self_attention: SelfAttention,
    pub regression: RegressionHead,
}

impl Modules {
    pub fn new(store: &mut ParameterStore, cfg: &PipelineConfig, rng: &mut impl Rng) -> Self {
        let encoder = Encoder::new(
            store,
            EncoderConfig {
                groups: cfg.encoder_groups,
                widths: cfg.encoder_widths,
                feature_dim: cfg.feature_dim,
            },
            rng,
        );
        let cross = CrossAttention::new(store, cfg.horizons.clone(), cfg.feature_dim, rng);
        let self_attention =
            SelfAttention::new(store, cfg.resolution_levels, cfg.feature_dim, rng);
        let regression = RegressionHead::new(store, cfg.feature_dim, 32, rng);
        Modules {
            encoder,
            cross,
            self_attention,
            regression,
        }
    }
}

/// A frame successfully registered against the working model.
struct FrameRegistration {
    pose: RigidTransform,
    significance: Vec<f64>,
    residual: f64,
}

/// State of a modeling run.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub world_cloud: PointCloud,
    /// Frame-to-world pose per frame (identity for failed frames).
    pub frame_poses: Vec<RigidTransform>,
    /// True where the frame never registered successfully.
    pub failure_flags: Vec<bool>,
    /// Completed refinement cycles.
    pub cycle: usize,
    /// Current maps over `world_cloud`.
    pub maps: WeightingMaps,
    pub metrics: Vec<CycleMetrics>,
}

/// A complete pipeline: parameters, modules and configuration.
pub struct Pipeline {
    pub store: ParameterStore,
    pub modules: Modules,
    pub cfg: PipelineConfig,
}

const INIT_SALT: u64 = 0x8af8_02bd_13cd_4e92;
const RUN_SALT: u64 = 0x1b2f_6ae0_9c55_7d31;

impl Pipeline {
    /// Fresh parameters, seeded by the configuration.
    pub fn new(cfg: PipelineConfig) -> Self {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
        let modules = Modules::new(&mut store, &cfg, &mut rng);
        Pipeline {
            store,
            modules,
            cfg,
        }
    }

    /// Rebuild over an existing store (e.g. a loaded checkpoint); missing
    /// parameters are initialized, existing ones are kept.
    pub fn with_store(cfg: PipelineConfig, mut store: ParameterStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
        let modules = Modules::new(&mut store, &cfg, &mut rng);
        Pipeline {
            store,
            modules,
            cfg,
        }
    }

    fn pcr_target_weights(&self, maps: &WeightingMaps) -> Vec<f64> {
        if !self.cfg.weighting {
            return vec![1.0; maps.len()];
        }
        // Geometry significance and distribution consistency steer the
        // registration; the registration's own map is neutral here.
        fuse_weights(&WeightingMaps {
            r_map: vec![1.0; maps.len()],
            s_map: maps.s_map.clone(),
            d_map: maps.d_map.clone(),
        })
    }

    fn pcs_weights(&self, r_map: &[f64], d_map: &[f64]) -> Vec<f64> {
        if !self.cfg.weighting {
            return vec![1.0; r_map.len()];
        }
        // Registration significance and distribution consistency steer the
        // sampling; the sampling's own map is neutral here.
        fuse_weights(&WeightingMaps {
            r_map: r_map.to_vec(),
            s_map: vec![1.0; r_map.len()],
            d_map: d_map.to_vec(),
        })
    }

    /// Register `src` onto `tgt` with the supplied target-side weights.
    fn register_weighted(
        &self,
        src: &PointCloud,
        tgt: &PointCloud,
        tgt_weights: &[f64],
        rng: &mut impl Rng,
    ) -> Result<RegistrationResult> {
        let store = &self.store;
        let (src_global, src_local, _) = self.modules.encoder.encode(store, src)?;
        let (tgt_global, tgt_local, _) = self.modules.encoder.encode(store, tgt)?;
        let (src_refined, _) = self.modules.cross.forward(
            store,
            src,
            &src_local.mean,
            &src_global.mean,
            &vec![1.0; src.len()],
        )?;
        let (tgt_refined, _) =
            self.modules
                .cross
                .forward(store, tgt, &tgt_local.mean, &tgt_global.mean, tgt_weights)?;
        let sim = similarity_matrix(&src_refined, &tgt_refined)?;
        let mut result = ransac_align(src, tgt, sim, &self.cfg.ransac(), rng)?;
        if self.cfg.icp_refine_iters > 0 {
            result.transform =
                icp_refine(src, tgt, &result.transform, self.cfg.icp_refine_iters, 0.2);
        }
        Ok(result)
    }

    /// Trimmed mean nearest-neighbor distance of a posed frame against a
    /// reference cloud: the acceptance score for candidate poses (the trim
    /// discounts the non-overlapping part of a partial view).
    fn trimmed_residual(frame: &PointCloud, pose: &RigidTransform, reference: &PointCloud) -> f64 {
        let moved = apply_transform(frame, pose);
        let mut dists: Vec<f64> = moved
            .iter()
            .map(|&p| {
                reference
                    .iter()
                    .map(|&q| p.dist2(q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        dists.sort_unstable_by(|a, b| a.total_cmp(b));
        let keep = ((dists.len() as f64 * 0.85).ceil() as usize).max(1);
        dists[..keep].iter().sum::<f64>() / keep as f64
    }

    /// Register a frame during a modeling run. The similarity-driven RANSAC
    /// estimate and the prior pose are both refined by the trimmed
    /// closest-point baseline; the candidate with the lower trimmed
    /// residual wins, and the frame counts as failed when even that
    /// residual exceeds the acceptance threshold.
    fn register_frame(
        &self,
        frame: &PointCloud,
        reference: &PointCloud,
        tgt_weights: &[f64],
        prior: &RigidTransform,
        rng: &mut impl Rng,
    ) -> Result<Option<FrameRegistration>> {
        let store = &self.store;
        let (src_global, src_local, _) = self.modules.encoder.encode(store, frame)?;
        let (tgt_global, tgt_local, _) = self.modules.encoder.encode(store, reference)?;
        let (src_refined, _) = self.modules.cross.forward(
            store,
            frame,
            &src_local.mean,
            &src_global.mean,
            &vec![1.0; frame.len()],
        )?;
        let (tgt_refined, _) = self.modules.cross.forward(
            store,
            reference,
            &tgt_local.mean,
            &tgt_global.mean,
            tgt_weights,
        )?;
        let sim = similarity_matrix(&src_refined, &tgt_refined)?;
        let significance = crate::pcr::significance_map_r(&sim);

        let iters = self.cfg.icp_refine_iters.max(1);
        // Coarse alignment under a generous trim, then a polish pass that
        // trusts most correspondences.
        let two_stage = |init: &RigidTransform| {
            let coarse = icp_refine(frame, reference, init, iters, 0.3);
            icp_refine(frame, reference, &coarse, iters, 0.1)
        };
        let mut candidates: Vec<RigidTransform> = Vec::with_capacity(2);
        match ransac_align(frame, reference, sim, &self.cfg.ransac(), rng) {
            Ok(result) => candidates.push(two_stage(&result.transform)),
            Err(Error::RegistrationFailed { .. }) => {}
            Err(other) => return Err(other),
        }
        // The prior pose (identity for the first attempt) seeds the
        // baseline refinement; with consecutive frames this is the
        // classical small-motion assumption.
        candidates.push(two_stage(prior));

        let (best, residual) = candidates
            .into_iter()
            .map(|pose| {
                let score = Self::trimmed_residual(frame, &pose, reference);
                (pose, score)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one candidate");

        let accept = self
            .cfg
            .ransac_inlier_tau
            .unwrap_or_else(|| 0.05 * frame.bbox_diagonal());
        if residual > accept {
            return Ok(None);
        }
        Ok(Some(FrameRegistration {
            pose: best,
            significance,
            residual,
        }))
    }

    /// One-off registration of a pair with neutral weights (the CLI entry
    /// point).
    pub fn register_pair(
        &self,
        src: &PointCloud,
        tgt: &PointCloud,
        seed: u64,
    ) -> Result<RegistrationResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RUN_SALT);
        self.register_weighted(src, tgt, &vec![1.0; tgt.len()], &mut rng)
    }

    /// Distribution map of a cloud under the current encoder, min-max
    /// normalized to `[0, 1]`.
    fn normalized_distribution_map(
        &self,
        cloud: &PointCloud,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let (global, local, _) = self.modules.encoder.encode(&self.store, cloud)?;
        let raw = distribution_map(&global, &local, self.cfg.m_samples, rng)?;
        Ok(normalize_min_max(&raw))
    }

    /// Sample `cloud` down to `n_out` points: encode, refine with the
    /// weighted self-attention, regress positions from farthest-point
    /// seeds. Returns the result plus the seed index of every output point.
    fn sample_weighted(
        &self,
        cloud: &PointCloud,
        weights: &[f64],
        n_out: usize,
    ) -> Result<(SamplingResult, Vec<usize>)> {
        let store = &self.store;
        let (_, local, _) = self.modules.encoder.encode(store, cloud)?;
        let (refined, att_cache) =
            self.modules
                .self_attention
                .forward(store, cloud, &local.mean, weights)?;
        let (sampled, reg_cache) =
            self.modules
                .regression
                .forward(store, &refined, cloud, n_out)?;
        let significance = significance_map_s(cloud, &sampled);
        let result = SamplingResult {
            sampled,
            significance,
            resolutions: att_cache.resolutions(),
        };
        Ok((result, reg_cache.seeds().to_vec()))
    }

    /// Standalone sampling at a ratio (the CLI entry point); weights are
    /// neutral.
    pub fn sample(&self, cloud: &PointCloud, ratio: f64) -> Result<SamplingResult> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!(
                "sampling ratio must lie in (0, 1], got {ratio}"
            )));
        }
        let n_out = ((ratio * cloud.len() as f64).round() as usize).clamp(1, cloud.len());
        let (result, _) = self.sample_weighted(cloud, &vec![1.0; cloud.len()], n_out)?;
        Ok(result)
    }

    /// Merge a registered frame into the working cloud and sample back to
    /// the budget, recomputing the maps over the new working cloud.
    fn merge_step(
        &self,
        world: &PointCloud,
        world_r: &[f64],
        registered: &PointCloud,
        frame_r: &[f64],
        rng: &mut impl Rng,
    ) -> Result<(PointCloud, WeightingMaps)> {
        let concat = world.concat(registered);
        let mut r_concat = world_r.to_vec();
        r_concat.extend_from_slice(frame_r);

        let d_concat = if self.cfg.weighting {
            self.normalized_distribution_map(&concat, rng)?
        } else {
            vec![1.0; concat.len()]
        };
        let pcs_w = self.pcs_weights(&r_concat, &d_concat);

        let n_out = self.cfg.budget.min(concat.len());
        let (result, seeds) = self.sample_weighted(&concat, &pcs_w, n_out)?;
        let world_new = result.sampled;

        // Maps over the new working cloud: registration significance is
        // pulled through the seed provenance, sampling significance is the
        // distance from each new point to the supporting evidence, and the
        // distribution map is evaluated on the new cloud directly.
        let maps = if self.cfg.weighting {
            let r_new: Vec<f64> = seeds.iter().map(|&s| r_concat[s]).collect();
            let s_new = normalize_by_max(&significance_map_s(&world_new, &concat));
            let d_new = self.normalized_distribution_map(&world_new, rng)?;
            WeightingMaps {
                r_map: r_new,
                s_map: s_new,
                d_map: d_new,
            }
        } else {
            WeightingMaps::all_ones(world_new.len())
        };
        Ok((world_new, maps))
    }

    /// Run the cyclic modeling loop over a frame sequence. When a
    /// ground-truth model is supplied, per-cycle Chamfer distances land in
    /// the metrics log.
    pub fn run_modeling(
        &self,
        seq: &FrameSequence,
        gt_model: Option<&PointCloud>,
    ) -> Result<ModelState> {
        let m = seq.frames.len();
        if m < 2 {
            return Err(Error::invalid("modeling needs at least two frames"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ RUN_SALT);

        let mut world = seq.frames[0].clone();
        let mut maps = WeightingMaps::all_ones(world.len());
        let mut poses = vec![RigidTransform::identity(); m];
        let mut failures = vec![false; m];
        // Registration significance per frame (available after the frame's
        // first successful registration).
        let mut frame_r: Vec<Vec<f64>> = seq.frames.iter().map(|f| vec![1.0; f.len()]).collect();
        let mut metrics = Vec::new();

        // Initial sequential pass. Each frame's prior is the last accepted
        // pose (consecutive frames move little relative to each other).
        let mut residuals = Vec::new();
        let mut prior = RigidTransform::identity();
        for k in 1..m {
            let frame = &seq.frames[k];
            let tgt_weights = self.pcr_target_weights(&maps);
            match self.register_frame(frame, &world, &tgt_weights, &prior, &mut rng)? {
                Some(reg) => {
                    poses[k] = reg.pose.clone();
                    frame_r[k] = reg.significance.clone();
                    residuals.push(reg.residual);
                    prior = reg.pose.clone();
                    let registered = apply_transform(frame, &reg.pose);
                    let (new_world, new_maps) =
                        self.merge_step(&world, &maps.r_map, &registered, &frame_r[k], &mut rng)?;
                    world = new_world;
                    maps = new_maps;
                }
                None => {
                    failures[k] = true;
                }
            }
        }
        let failed = failures.iter().filter(|&&f| f).count();
        if failed * 2 >= m {
            return Err(Error::TooManyFailures {
                failed,
                total: m,
            });
        }
        metrics.push(CycleMetrics {
            cycle: 0,
            mean_residual: if residuals.is_empty() {
                f64::NAN
            } else {
                residuals.iter().sum::<f64>() / residuals.len() as f64
            },
            failures: failed,
            world_size: world.len(),
            chamfer_to_gt: gt_model.map(|gt| chamfer_distance(&world, gt)),
        });

        // Refinement cycles: re-register every frame against the current
        // model, then rebuild it from all successfully posed frames.
        for cycle in 1..=self.cfg.cycles {
            let reference = world.clone();
            let ref_maps = maps.clone();
            let tgt_weights = self.pcr_target_weights(&ref_maps);
            let mut residuals = Vec::new();
            for k in 0..m {
                let frame = &seq.frames[k];
                if let Some(reg) =
                    self.register_frame(frame, &reference, &tgt_weights, &poses[k], &mut rng)?
                {
                    let accept = failures[k]
                        || reg.residual
                            <= Self::trimmed_residual(frame, &poses[k], &reference);
                    if accept {
                        poses[k] = reg.pose.clone();
                        frame_r[k] = reg.significance.clone();
                        failures[k] = false;
                    }
                    residuals.push(reg.residual);
                }
            }

            // Rebuild the model from the posed frames.
            let mut merged: Option<(PointCloud, Vec<f64>)> = None;
            for k in 0..m {
                if failures[k] {
                    continue;
                }
                let registered = apply_transform(&seq.frames[k], &poses[k]);
                merged = Some(match merged {
                    None => (registered, frame_r[k].clone()),
                    Some((cloud, mut r)) => {
                        r.extend_from_slice(&frame_r[k]);
                        (cloud.concat(&registered), r)
                    }
                });
            }
            let (concat, r_concat) =
                merged.ok_or(Error::TooManyFailures { failed: m, total: m })?;
            let d_concat = if self.cfg.weighting {
                self.normalized_distribution_map(&concat, &mut rng)?
            } else {
                vec![1.0; concat.len()]
            };
            let pcs_w = self.pcs_weights(&r_concat, &d_concat);
            let n_out = self.cfg.budget.min(concat.len());
            let (result, seeds) = self.sample_weighted(&concat, &pcs_w, n_out)?;
            world = result.sampled;
            maps = if self.cfg.weighting {
                WeightingMaps {
                    r_map: seeds.iter().map(|&s| r_concat[s]).collect(),
                    s_map: normalize_by_max(&significance_map_s(&world, &concat)),
                    d_map: self.normalized_distribution_map(&world, &mut rng)?,
                }
            } else {
                WeightingMaps::all_ones(world.len())
            };

            let failed = failures.iter().filter(|&&f| f).count();
            metrics.push(CycleMetrics {
                cycle,
                mean_residual: if residuals.is_empty() {
                    f64::NAN
                } else {
                    residuals.iter().sum::<f64>() / residuals.len() as f64
                },
                failures: failed,
                world_size: world.len(),
                chamfer_to_gt: gt_model.map(|gt| chamfer_distance(&world, gt)),
            });
        }

        Ok(ModelState {
            world_cloud: world,
            frame_poses: poses,
            failure_flags: failures,
            cycle: self.cfg.cycles,
            maps,
            metrics,
        })
    }

    // -- training -----------------------------------------------------------

    /// One registration training step; returns the loss (soft registration
    /// distance plus the weighted KL terms).
    fn train_pcr_step(&mut self, pair: &RgPair) -> Result<f64> {
        let store = &self.store;
        let (src_global, src_local, src_enc_cache) =
            self.modules.encoder.encode(store, &pair.src)?;
        let (tgt_global, tgt_local, tgt_enc_cache) =
            self.modules.encoder.encode(store, &pair.tgt)?;
        let ones_src = vec![1.0; pair.src.len()];
        let ones_tgt = vec![1.0; pair.tgt.len()];
        let (src_refined, src_cache) = self.modules.cross.forward(
            store,
            &pair.src,
            &src_local.mean,
            &src_global.mean,
            &ones_src,
        )?;
        let (tgt_refined, tgt_cache) = self.modules.cross.forward(
            store,
            &pair.tgt,
            &tgt_local.mean,
            &tgt_global.mean,
            &ones_tgt,
        )?;
        let sim = similarity_matrix(&src_refined, &tgt_refined)?;
        let (soft_loss, grad_sim) = loss_lr_soft(&pair.src, &pair.tgt, &sim, &pair.t_gt);

        let beta = self.cfg.kl_beta;
        let kl = kl_to_standard_normal(&src_global)
            + kl_to_standard_normal(&tgt_global)
            + kl_to_standard_normal(&src_local)
            + kl_to_standard_normal(&tgt_local);
        let loss = soft_loss + beta * kl;

        // Backward: similarity -> refined features -> attention -> encoder.
        let (grad_src_ref, grad_tgt_ref) =
            similarity_matrix_backward(&src_refined, &tgt_refined, &sim, &grad_sim);
        let store = &mut self.store;
        let (grad_src_feats, grad_src_global) =
            self.modules.cross.backward(store, &src_cache, &grad_src_ref);
        let (grad_tgt_feats, grad_tgt_global) =
            self.modules.cross.backward(store, &tgt_cache, &grad_tgt_ref);

        let (src_kl_gm, src_kl_gv) = kl_backward(&src_global, beta);
        let (src_kl_lm, src_kl_lv) = kl_backward(&src_local, beta);
        let mut src_grads = EncodeGrads {
            local_mu: grad_src_feats,
            local_logvar: src_kl_lv,
            global_mu: grad_src_global,
            global_logvar: src_kl_gv,
        };
        src_grads.local_mu.add_assign(&src_kl_lm);
        src_grads.global_mu.add_assign(&src_kl_gm);
        self.modules.encoder.backward(store, &src_enc_cache, &src_grads);

        let (tgt_kl_gm, tgt_kl_gv) = kl_backward(&tgt_global, beta);
        let (tgt_kl_lm, tgt_kl_lv) = kl_backward(&tgt_local, beta);
        let mut tgt_grads = EncodeGrads {
            local_mu: grad_tgt_feats,
            local_logvar: tgt_kl_lv,
            global_mu: grad_tgt_global,
            global_logvar: tgt_kl_gv,
        };
        tgt_grads.local_mu.add_assign(&tgt_kl_lm);
        tgt_grads.global_mu.add_assign(&tgt_kl_gm);
        self.modules.encoder.backward(store, &tgt_enc_cache, &tgt_grads);

        Ok(loss)
    }

    /// One sampling training step; returns the Chamfer loss against the
    /// clean ground-truth cloud.
    fn train_pcs_step(&mut self, stack: &SpStack) -> Result<f64> {
        let store = &self.store;
        let (_, local, enc_cache) = self.modules.encoder.encode(store, &stack.stacked)?;
        let ones = vec![1.0; stack.stacked.len()];
        let (refined, att_cache) =
            self.modules
                .self_attention
                .forward(store, &stack.stacked, &local.mean, &ones)?;
        let n_out = stack.gt_cloud.len().min(stack.stacked.len());
        let (sampled, reg_cache) =
            self.modules
                .regression
                .forward(store, &refined, &stack.stacked, n_out)?;
        let (loss, grad_pos) = loss_ls_with_grad(&stack.gt_cloud, &sampled);

        let store = &mut self.store;
        let grad_refined = self.modules.regression.backward(store, &reg_cache, &grad_pos);
        let grad_feats = self
            .modules
            .self_attention
            .backward(store, &att_cache, &grad_refined);
        let mut grads = EncodeGrads {
            local_mu: grad_feats,
            local_logvar: DenseArray::zeros(local.logvar.shape()),
            global_mu: DenseArray::zeros(&[1, self.cfg.feature_dim]),
            global_logvar: DenseArray::zeros(&[1, self.cfg.feature_dim]),
        };
        // The sampling path reads only the point-wise means; other heads
        // receive zero gradient this step.
        grads.local_mu.scale(1.0);
        self.modules.encoder.backward(store, &enc_cache, &grads);
        Ok(loss)
    }

    /// Alternate registration (odd steps) and sampling (even steps)
    /// training over the dataset, round-robin within each kind.
    pub fn train(&mut self, dataset: &TrainDataset, steps: usize) -> Result<TrainLog> {
        if dataset.pairs.is_empty() || dataset.stacks.is_empty() {
            return Err(Error::invalid(
                "training needs at least one registration pair and one stack",
            ));
        }
        let mut log = TrainLog::default();
        let (lr, b1, b2, eps) = (self.cfg.learning_rate, 0.9, 0.999, 1e-8);
        let mut pcr_idx = 0usize;
        let mut pcs_idx = 0usize;
        for step in 1..=steps {
            self.store.zero_grads();
            let (path, batch, loss) = if step % 2 == 1 {
                let i = pcr_idx % dataset.pairs.len();
                pcr_idx += 1;
                ("pcr", i, self.train_pcr_step(&dataset.pairs[i].clone())?)
            } else {
                let i = pcs_idx % dataset.stacks.len();
                pcs_idx += 1;
                ("pcs", i, self.train_pcs_step(&dataset.stacks[i].clone())?)
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch });
            }
            self.store.adam_step(lr, b1, b2, eps);
            log.entries.push(TrainLogEntry {
                step,
                path: path.to_string(),
                loss,
            });
        }
        Ok(log)
    }

    /// Forward-only mean losses over a dataset: (mean soft registration
    /// loss, mean sampling Chamfer loss). Used to measure training
    /// progress.
    pub fn mean_losses(&self, dataset: &TrainDataset) -> Result<(f64, f64)> {
        let store = &self.store;
        let mut lr_sum = 0.0;
        for pair in &dataset.pairs {
            let (sg, sl, _) = self.modules.encoder.encode(store, &pair.src)?;
            let (tg, tl, _) = self.modules.encoder.encode(store, &pair.tgt)?;
            let (sr, _) = self.modules.cross.forward(
                store,
                &pair.src,
                &sl.mean,
                &sg.mean,
                &vec![1.0; pair.src.len()],
            )?;
            let (tr, _) = self.modules.cross.forward(
                store,
                &pair.tgt,
                &tl.mean,
                &tg.mean,
                &vec![1.0; pair.tgt.len()],
            )?;
            let sim = similarity_matrix(&sr, &tr)?;
            let (loss, _) = loss_lr_soft(&pair.src, &pair.tgt, &sim, &pair.t_gt);
            lr_sum += loss;
        }
        let mut ls_sum = 0.0;
        for stack in &dataset.stacks {
            let (_, local, _) = self.modules.encoder.encode(store, &stack.stacked)?;
            let ones = vec![1.0; stack.stacked.len()];
            let (refined, _) =
                self.modules
                    .self_attention
                    .forward(store, &stack.stacked, &local.mean, &ones)?;
            let n_out = stack.gt_cloud.len().min(stack.stacked.len());
            let (sampled, _) =
                self.modules
                    .regression
                    .forward(store, &refined, &stack.stacked, n_out)?;
            ls_sum += chamfer_distance(&stack.gt_cloud, &sampled);
        }
        Ok((
            lr_sum / dataset.pairs.len() as f64,
            ls_sum / dataset.stacks.len() as f64,
        ))
    }
}

/// Training data: registration pairs and stacked sampling examples.
#[derive(Debug, Clone, Default)]
pub struct TrainDataset {
    pub pairs: Vec<RgPair>,
    pub stacks: Vec<SpStack>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub path: String,
    pub loss: f64,
}

/// Loss curve of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,path,loss")?;
        for e in &self.entries {
            writeln!(w, "{},{},{:.9e}", e.step, e.path, e.loss)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error_deg, translation_error};
    use crate::io::SequenceMetadata;
    use crate::synth::{make_sequence, GenParams, ShapeKind, ShapeSpec};
    use rand::rngs::StdRng;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            cycles: 1,
            budget: 256,
            horizons: vec![4, 8],
            resolution_levels: 2,
            feature_dim: 16,
            encoder_groups: [4, 6],
            encoder_widths: [8, 16],
            m_samples: 4,
            ransac_iters: 128,
            icp_refine_iters: 10,
            seed: 7,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn fuse_weights_examples() {
        let ones = WeightingMaps::all_ones(5);
        assert!(fuse_weights(&ones).iter().all(|&w| w == 1.0));

        let mut with_zero = WeightingMaps::all_ones(3);
        with_zero.d_map[1] = 0.0;
        let fused = fuse_weights(&with_zero);
        assert_eq!(fused, vec![1.0, WEIGHT_FLOOR, 1.0]);

        // Product-then-floor oracle on arbitrary values.
        let maps = WeightingMaps {
            r_map: vec![0.9, 0.1, 0.5],
            s_map: vec![0.8, 0.2, 0.0],
            d_map: vec![0.7, 0.3, 1.0],
        };
        maps.validate().unwrap();
        let fused = fuse_weights(&maps);
        for i in 0..3 {
            let expect = (maps.r_map[i] * maps.d_map[i] * maps.s_map[i]).max(WEIGHT_FLOOR);
            assert_eq!(fused[i], expect);
        }
    }

    #[test]
    fn normalization_helpers() {
        assert_eq!(normalize_min_max(&[2.0, 2.0, 2.0]), vec![1.0; 3]);
        let n = normalize_min_max(&[1.0, 3.0, 2.0]);
        assert_eq!(n, vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_by_max(&[0.0, 0.0]), vec![1.0; 2]);
        assert_eq!(normalize_by_max(&[1.0, 4.0, 2.0]), vec![0.25, 1.0, 0.5]);
    }

    #[test]
    fn maps_validation() {
        let mut maps = WeightingMaps::all_ones(4);
        maps.validate().unwrap();
        maps.s_map[2] = 1.5;
        assert!(maps.validate().is_err());
        maps.s_map.pop();
        assert!(maps.validate().is_err());
    }

    fn small_sphere_sequence(seed: u64, frames: usize) -> crate::synth::SyntheticSequence {
        let spec = ShapeSpec {
            kind: ShapeKind::Sphere { radius: 0.5 },
            points: 196,
        };
        let params = GenParams {
            noise_sigma: 0.001,
            outlier_fraction: 0.0,
            ..GenParams::default()
        };
        make_sequence(&spec, frames, &params, seed).unwrap()
    }

    #[test]
    fn identical_frames_recover_identity_poses() {
        let cfg = tiny_config();
        let pipeline = Pipeline::new(cfg);
        let frame = small_sphere_sequence(3, 2).sequence.frames[0].clone();
        let seq = FrameSequence {
            frames: vec![frame.clone(), frame.clone(), frame],
            poses_gt: None,
            metadata: SequenceMetadata::default(),
        };
        let state = pipeline.run_modeling(&seq, None).unwrap();
        let diag = seq.frames[0].bbox_diagonal();
        for (k, pose) in state.frame_poses.iter().enumerate() {
            assert!(
                rotation_error_deg(&nalgebra::Matrix3::identity(), pose.rotation()) < 0.5,
                "frame {k} rotation strayed"
            );
            assert!(
                pose.translation().norm() < 0.01 * diag,
                "frame {k} translation strayed"
            );
        }
        assert!(state.world_cloud.len() <= pipeline.cfg.budget);
    }

    #[test]
    fn modeling_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let seq = small_sphere_sequence(11, 3).sequence;
        let a = Pipeline::new(cfg.clone()).run_modeling(&seq, None).unwrap();
        let b = Pipeline::new(cfg).run_modeling(&seq, None).unwrap();
        assert_eq!(a.world_cloud, b.world_cloud);
        assert_eq!(a.frame_poses, b.frame_poses);
    }

    #[test]
    fn first_merge_is_bit_identical_to_unweighted_modules() {
        // With two frames and no refinement cycles, the full-fusion run and
        // the weighting-disabled run execute the first alternation on
        // all-ones maps; outputs must agree bit for bit.
        let mut cfg = tiny_config();
        cfg.cycles = 0;
        let seq_full = small_sphere_sequence(17, 2).sequence;

        let on = Pipeline::new(cfg.clone()).run_modeling(&seq_full, None).unwrap();
        cfg.weighting = false;
        let off = Pipeline::new(cfg).run_modeling(&seq_full, None).unwrap();
        assert_eq!(on.world_cloud, off.world_cloud);
        assert_eq!(on.frame_poses, off.frame_poses);
    }

    #[test]
    fn rejects_single_frame_sequences() {
        let pipeline = Pipeline::new(tiny_config());
        let seq = FrameSequence {
            frames: vec![small_sphere_sequence(5, 2).sequence.frames[0].clone()],
            poses_gt: None,
            metadata: SequenceMetadata::default(),
        };
        assert!(pipeline.run_modeling(&seq, None).is_err());
    }

    #[test]
    fn synthetic_sequence_poses_and_chain_consistency() {
        // An asymmetric shape: poses are identifiable (a sphere's rotation
        // would not be).
        let spec = ShapeSpec {
            kind: ShapeKind::Composite {
                parts: vec![
                    crate::synth::CompositePart {
                        kind: ShapeKind::Sphere { radius: 0.15 },
                        offset: [-0.4, 0.0, 0.0],
                    },
                    crate::synth::CompositePart {
                        kind: ShapeKind::Cuboid {
                            size: [0.3, 0.2, 0.25],
                        },
                        offset: [0.0, 0.0, 0.1],
                    },
                    crate::synth::CompositePart {
                        kind: ShapeKind::Sphere { radius: 0.22 },
                        offset: [0.45, 0.1, -0.05],
                    },
                ],
            },
            points: 512,
        };
        let params = GenParams {
            noise_sigma: 0.001,
            outlier_fraction: 0.0,
            ..GenParams::default()
        };
        let synth = make_sequence(&spec, 3, &params, 23).unwrap();
        let mut cfg = tiny_config();
        cfg.budget = 512;
        let pipeline = Pipeline::new(cfg);
        let state = pipeline.run_modeling(&synth.sequence, Some(&synth.gt_model)).unwrap();
        let gts = synth.sequence.poses_gt.as_ref().unwrap();

        // Poses are only identified up to the first frame's pose (the world
        // frame is anchored to frame 0), so compare relative poses.
        for k in 1..3 {
            let rel_pred = state.frame_poses[0].invert().compose(&state.frame_poses[k]);
            let rel_gt = gts[0].invert().compose(&gts[k]);
            let er = rotation_error_deg(rel_gt.rotation(), rel_pred.rotation());
            let et = translation_error(rel_gt.translation(), rel_pred.translation());
            assert!(er < 2.0, "frame {k}: relative rotation error {er}");
            assert!(et < 0.05 * synth.gt_model.bbox_diagonal(), "frame {k}: et {et}");
        }
        assert!(!state.metrics.is_empty());
        assert!(state.metrics.last().unwrap().chamfer_to_gt.is_some());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let spec = ShapeSpec {
            kind: ShapeKind::Sphere { radius: 0.5 },
            points: 128,
        };
        let params = GenParams::default();
        let dataset = TrainDataset {
            pairs: vec![crate::synth::make_rg_pair(&spec, &params, 3).unwrap()],
            stacks: vec![crate::synth::make_sp_stack(&spec, 2, &params, 4).unwrap()],
        };
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        let mut pipeline = Pipeline::new(cfg);
        let before: Vec<(String, DenseArray)> = pipeline
            .store
            .names()
            .map(|n| (n.to_string(), pipeline.store.value(n).clone()))
            .collect();
        pipeline.train(&dataset, 6).unwrap();
        for (name, value) in before {
            assert_eq!(
                &value,
                pipeline.store.value(&name),
                "parameter {name} changed under zero learning rate"
            );
        }
    }

    #[test]
    fn training_reduces_both_losses() {
        let spec = ShapeSpec {
            kind: ShapeKind::Sphere { radius: 0.5 },
            points: 128,
        };
        let params = GenParams {
            noise_sigma: 0.001,
            outlier_fraction: 0.0,
            ..GenParams::default()
        };
        let dataset = TrainDataset {
            pairs: (0..4)
                .map(|i| crate::synth::make_rg_pair(&spec, &params, 100 + i).unwrap())
                .collect(),
            stacks: (0..4)
                .map(|i| crate::synth::make_sp_stack(&spec, 2, &params, 200 + i).unwrap())
                .collect(),
        };
        let mut cfg = tiny_config();
        cfg.learning_rate = 2e-3;
        let mut pipeline = Pipeline::new(cfg);
        let (lr0, ls0) = pipeline.mean_losses(&dataset).unwrap();
        let log = pipeline.train(&dataset, 60).unwrap();
        assert_eq!(log.entries.len(), 60);
        let (lr1, ls1) = pipeline.mean_losses(&dataset).unwrap();
        assert!(lr1 < lr0, "registration loss did not improve: {lr0} -> {lr1}");
        assert!(ls1 < ls0, "sampling loss did not improve: {ls0} -> {ls1}");
    }

    #[test]
    fn alternation_order_is_pcr_first() {
        let spec = ShapeSpec {
            kind: ShapeKind::Sphere { radius: 0.5 },
            points: 128,
        };
        let params = GenParams::default();
        let dataset = TrainDataset {
            pairs: vec![crate::synth::make_rg_pair(&spec, &params, 3).unwrap()],
            stacks: vec![crate::synth::make_sp_stack(&spec, 2, &params, 4).unwrap()],
        };
        let mut pipeline = Pipeline::new(tiny_config());
        let log = pipeline.train(&dataset, 4).unwrap();
        let kinds: Vec<&str> = log.entries.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(kinds, vec!["pcr", "pcs", "pcr", "pcs"]);
    }

    #[test]
    fn train_log_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let log = TrainLog {
            entries: vec![
                TrainLogEntry {
                    step: 1,
                    path: "pcr".into(),
                    loss: 0.5,
                },
                TrainLogEntry {
                    step: 2,
                    path: "pcs".into(),
                    loss: 0.25,
                },
            ],
        };
        log.to_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,path,loss"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn unused_rng_type_is_exercised() {
        // StdRng is used across module tests; keep the import honest here.
        use rand::SeedableRng;
        let _ = StdRng::seed_from_u64(0);
    }
}
