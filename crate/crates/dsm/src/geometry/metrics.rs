//! Evaluation metrics: isotropic rotation/translation errors, Chamfer
//! distance, and F-score at a distance threshold.

use super::{Point3, PointCloud};
use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Isotropic rotation error in degrees: the geodesic angle of
/// `R_gt^T · R_pred`, i.e. `arccos((trace - 1) / 2)` on `[0°, 180°]`.
///
/// The matrix inverse equals the transpose for rotations. The cosine term
/// is clamped to `[-1, 1]` (rounding can push the trace out of range), and
/// the angle is evaluated as `atan2(sin, cos)` with the sine taken from the
/// antisymmetric part — the same function, but conditioned well enough near
/// 0° that exact recovery reports ~1e-14° instead of arccos's ~1e-6° noise
/// floor.
pub fn rotation_error_deg(r_gt: &Matrix3<f64>, r_pred: &Matrix3<f64>) -> f64 {
    let q = r_gt.transpose() * r_pred;
    let cos = ((q.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // Q - Q^T = 2 sin(theta) [axis]_x, so |vee| / 2 = sin(theta) >= 0.
    let sx = q[(2, 1)] - q[(1, 2)];
    let sy = q[(0, 2)] - q[(2, 0)];
    let sz = q[(1, 0)] - q[(0, 1)];
    let sin = 0.5 * (sx * sx + sy * sy + sz * sz).sqrt();
    sin.atan2(cos).to_degrees()
}

/// Translation error: Euclidean norm of the difference, in meters.
pub fn translation_error(t_gt: &Vector3<f64>, t_pred: &Vector3<f64>) -> f64 {
    (t_gt - t_pred).norm()
}

fn min_dist2_to(p: Point3, cloud: &PointCloud) -> f64 {
    let mut best = f64::INFINITY;
    for &q in cloud.iter() {
        let d2 = p.dist2(q);
        if d2 < best {
            best = d2;
        }
    }
    best
}

/// Symmetric Chamfer distance in squared meters: the mean squared
/// nearest-neighbor distance in each direction, each direction normalized
/// by its own point count, summed.
pub fn chamfer_distance(p: &PointCloud, o: &PointCloud) -> f64 {
    let p_to_o: f64 = p.iter().map(|&q| min_dist2_to(q, o)).sum::<f64>() / p.len() as f64;
    let o_to_p: f64 = o.iter().map(|&q| min_dist2_to(q, p)).sum::<f64>() / o.len() as f64;
    p_to_o + o_to_p
}

/// F-score at absolute distance threshold `tau` (meters): harmonic mean of
/// precision (fraction of `pred` within `tau` of `gt`) and recall (fraction
/// of `gt` within `tau` of `pred`). Returns 0 when both are 0.
pub fn fscore_at_tau(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "F-score threshold must be positive, got {tau}"
        )));
    }
    let tau2 = tau * tau;
    let precision = pred
        .iter()
        .filter(|&&p| min_dist2_to(p, gt) <= tau2)
        .count() as f64
        / pred.len() as f64;
    let recall = gt
        .iter()
        .filter(|&&g| min_dist2_to(g, pred) <= tau2)
        .count() as f64
        / gt.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// The conventional "@1%" threshold: 1% of the ground-truth cloud's
/// axis-aligned bounding-box diagonal.
pub fn fscore_tau_1pct(gt: &PointCloud) -> f64 {
    0.01 * gt.bbox_diagonal()
}
