//! Geometric primitives: points, clouds, rigid transforms, neighbor indices.
//!
//! Everything here is exact, deterministic and allocation-straightforward;
//! the learned modules and the evaluation suite are built on these types.

mod kabsch;
mod metrics;
mod sampling;

pub use kabsch::kabsch;
pub use metrics::{
    chamfer_distance, fscore_at_tau, fscore_tau_1pct, rotation_error_deg, translation_error,
};
pub use sampling::{farthest_point_sampling, knn};

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// A 3D point in meters. Coordinates are always finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    /// Construct a point. Panics on non-finite coordinates; data read from
    /// external sources should go through [`Point3::try_new`] instead.
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        assert!(
            x.is_finite() && y.is_finite() && z.is_finite(),
            "Point3 coordinates must be finite, got ({x}, {y}, {z})"
        );
        Point3 { x, y, z }
    }

    /// Fallible constructor for untrusted input.
    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self> {
        if x.is_finite() && y.is_finite() && z.is_finite() {
            Ok(Point3 { x, y, z })
        } else {
            Err(Error::NonFinite {
                context: format!("point ({x}, {y}, {z})"),
            })
        }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Point3::new(v.x, v.y, v.z)
    }

    /// Squared Euclidean distance to another point.
    pub fn dist2(self, other: Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn dist(self, other: Point3) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// An ordered, non-empty sequence of points. Point order is significant:
/// index `i` identifies the same point in every per-point map derived from
/// the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    /// Build a cloud from points; rejects the empty sequence.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(PointCloud { points })
    }

    /// Build from raw coordinate triples, validating finiteness.
    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        let points = coords
            .iter()
            .map(|c| Point3::try_new(c[0], c[1], c[2]))
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least one point
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    /// New cloud holding `self` followed by `other`, preserving order.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    /// Cloud restricted to the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<PointCloud> {
        if indices.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let points = indices.iter().map(|&i| self.points[i]).collect();
        Ok(PointCloud { points })
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in &self.points {
            c += p.to_vector();
        }
        c / self.points.len() as f64
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.points[0].to_vector();
        let mut hi = lo;
        for p in &self.points[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            lo.z = lo.z.min(p.z);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
            hi.z = hi.z.max(p.z);
        }
        (lo, hi)
    }

    /// Diagonal length of the axis-aligned bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }
}

impl std::ops::Index<usize> for PointCloud {
    type Output = Point3;
    fn index(&self, i: usize) -> &Point3 {
        &self.points[i]
    }
}

/// A rigid transform: proper rotation plus translation, acting as
/// `p -> R p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validating constructor: `R` must be orthonormal with determinant +1
    /// within [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().any(|v| !v.is_finite()) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "rigid transform".to_string(),
            });
        }
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > ROTATION_TOL {
            return Err(Error::InvalidRotation {
                reason: format!("R^T R deviates from identity by {ortho_err:.3e}"),
            });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation {
                reason: format!("det(R) = {det:.12} (must be +1)"),
            });
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    /// Internal constructor for transforms that are valid by construction
    /// (composition, inversion, Kabsch output).
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(
            (rotation.transpose() * rotation - Matrix3::identity())
                .abs()
                .max()
                < 1e-7
        );
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `angle_rad` about `axis` (normalized internally), then
    /// translation by `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, t: Vector3<f64>) -> Result<Self> {
        let n = axis.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("rotation axis must be a nonzero vector"));
        }
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle_rad,
        )
        .into_inner();
        RigidTransform::new(rotation, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: Point3) -> Point3 {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    /// `compose(A, B)` applies `B` first: `(A ∘ B)(p) = A(B(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn invert(&self) -> RigidTransform {
        let rot_t = self.rotation.transpose();
        RigidTransform::from_parts(rot_t, -(rot_t * self.translation))
    }
}

/// Apply a rigid transform to every point, preserving order.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    let points = cloud.iter().map(|&p| t.apply_point(p)).collect();
    PointCloud { points }
}

/// Exact k-nearest-neighbor lists: for each query point, the indices of its
/// `k` nearest reference points in ascending distance, ties broken by lower
/// reference index.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    k: usize,
    /// Row-major: `indices[i * k .. (i + 1) * k]` are query `i`'s neighbors.
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub(crate) fn from_rows(k: usize, indices: Vec<usize>) -> Self {
        debug_assert_eq!(indices.len() % k.max(1), 0);
        NeighborIndex { k, indices }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of query points.
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Neighbor indices of query point `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}
