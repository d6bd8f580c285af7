//! Closed-form least-squares rigid alignment of paired point sets.

use super::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Least-squares rigid transform `T` minimizing `Σ ‖T(src_i) − dst_i‖²`
/// over paired points, with the reflection corrected so the rotation is
/// proper (`det = +1`).
///
/// Requires at least 3 pairs that are not all collinear.
pub fn kabsch(src: &PointCloud, dst: &PointCloud) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::invalid(format!(
            "kabsch: src has {} points, dst has {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry {
            reason: format!("need at least 3 correspondences, got {}", src.len()),
        });
    }

    let c_src = src.centroid();
    let c_dst = dst.centroid();

    // Cross-covariance of the centered sets.
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst.iter()) {
        let a = p.to_vector() - c_src;
        let b = q.to_vector() - c_dst;
        h += a * b.transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateGeometry {
        reason: "SVD failed to produce U".to_string(),
    })?;
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateGeometry {
        reason: "SVD failed to produce V^T".to_string(),
    })?;

    // Collinear input leaves the rotation about the line unconstrained:
    // the two smallest singular values vanish together.
    let s = svd.singular_values;
    if s[0] <= 0.0 || s[1] <= 1e-12 * s[0] {
        return Err(Error::DegenerateGeometry {
            reason: "correspondences are collinear".to_string(),
        });
    }

    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = v * correction * u.transpose();
    let translation = c_dst - rotation * c_src;

    Ok(RigidTransform::from_parts(rotation, translation))
}
