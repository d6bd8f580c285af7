//! Evaluation reports and the frozen `metrics.json` schema.

use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_distance, fscore_at_tau, fscore_tau_1pct, rotation_error_deg, translation_error,
    PointCloud, RigidTransform,
};
use serde::{Deserialize, Serialize};

/// Modeling quality of a predicted cloud against ground truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelingReport {
    /// Symmetric Chamfer distance (squared meters).
    pub chamfer: f64,
    /// F-score at 1% of the ground-truth bounding-box diagonal.
    pub fscore_1pct: f64,
    /// Absolute difference of the axis-aligned bounding-box extents,
    /// per axis (meters).
    pub bbox_error: [f64; 3],
}

/// Compare a model cloud against the ground-truth cloud.
pub fn evaluate_modeling(model: &PointCloud, gt: &PointCloud) -> ModelingReport {
    let tau = fscore_tau_1pct(gt);
    let fscore = fscore_at_tau(model, gt, tau).expect("tau is positive for a non-degenerate gt");
    let (mlo, mhi) = model.bounding_box();
    let (glo, ghi) = gt.bounding_box();
    let me = mhi - mlo;
    let ge = ghi - glo;
    ModelingReport {
        chamfer: chamfer_distance(model, gt),
        fscore_1pct: fscore,
        bbox_error: [
            (me.x - ge.x).abs(),
            (me.y - ge.y).abs(),
            (me.z - ge.z).abs(),
        ],
    }
}

/// Aggregate registration quality over a batch of pairs. `None` entries
/// mark failed registrations; means are taken over the successes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegistrationReport {
    pub mean_er_deg: f64,
    pub mean_et: f64,
    pub failure_rate: f64,
}

pub fn evaluate_registration(
    predictions: &[Option<RigidTransform>],
    ground_truths: &[RigidTransform],
) -> Result<RegistrationReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::invalid(format!(
            "prediction count {} does not match ground-truth count {}",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("no registration results to evaluate"));
    }
    let mut er_sum = 0.0;
    let mut et_sum = 0.0;
    let mut ok = 0usize;
    for (pred, gt) in predictions.iter().zip(ground_truths) {
        if let Some(t) = pred {
            er_sum += rotation_error_deg(gt.rotation(), t.rotation());
            et_sum += translation_error(gt.translation(), t.translation());
            ok += 1;
        }
    }
    let (mean_er_deg, mean_et) = if ok > 0 {
        (er_sum / ok as f64, et_sum / ok as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(RegistrationReport {
        mean_er_deg,
        mean_et,
        failure_rate: (predictions.len() - ok) as f64 / predictions.len() as f64,
    })
}

/// Per-cycle statistics logged by a modeling run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub mean_residual: f64,
    pub failures: usize,
    pub world_size: usize,
    /// Chamfer against the ground-truth model, when one was supplied.
    pub chamfer_to_gt: Option<f64>,
}

/// The frozen `metrics.json` document. Keys never change; fields that do
/// not apply to a given run are `null`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct MetricsJson {
    pub chamfer: Option<f64>,
    pub fscore_1pct: Option<f64>,
    pub bbox_error: Option<[f64; 3]>,
    pub mean_er_deg: Option<f64>,
    pub mean_et: Option<f64>,
    pub failure_rate: Option<f64>,
    pub per_cycle: Vec<CycleMetrics>,
}

impl MetricsJson {
    pub fn from_modeling(report: &ModelingReport) -> Self {
        MetricsJson {
            chamfer: Some(report.chamfer),
            fscore_1pct: Some(report.fscore_1pct),
            bbox_error: Some(report.bbox_error),
            ..MetricsJson::default()
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
