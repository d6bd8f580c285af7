//! Synthetic benchmark construction: analytic surfaces with exact normals,
//! partial views with controlled noise and outliers, registration pairs,
//! stacked sampling inputs, and multi-frame sequences with exact poses.
//!
//! Everything is deterministic per seed, and every generated cloud keeps an
//! analytic surface to check against.

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, Point3, PointCloud, RigidTransform};
use crate::io::{FrameSequence, SequenceMetadata};
use crate::nn::standard_normal;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A primitive or composite analytic shape with a target surface point
/// count. Sizes are in meters and must be positive; composites hold 2–5
/// translated primitive parts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere { radius: f64 },
    #[serde(rename = "box")]
    Cuboid { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Torus { major_radius: f64, minor_radius: f64 },
    Composite { parts: Vec<CompositePart> },
}

/// One translated primitive inside a composite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompositePart {
    pub kind: ShapeKind,
    pub offset: [f64; 3],
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::invalid("shape needs a positive point count"));
        }
        self.kind.validate(true)
    }
}

impl ShapeKind {
    fn validate(&self, allow_composite: bool) -> Result<()> {
        match self {
            ShapeKind::Sphere { radius } => {
                if *radius <= 0.0 {
                    return Err(Error::invalid("sphere radius must be positive"));
                }
            }
            ShapeKind::Cuboid { size } => {
                if size.iter().any(|&s| s <= 0.0) {
                    return Err(Error::invalid("box sizes must be positive"));
                }
            }
            ShapeKind::Cylinder { radius, height } => {
                if *radius <= 0.0 || *height <= 0.0 {
                    return Err(Error::invalid("cylinder dimensions must be positive"));
                }
            }
            ShapeKind::Torus {
                major_radius,
                minor_radius,
            } => {
                if *major_radius <= 0.0 || *minor_radius <= 0.0 || minor_radius >= major_radius {
                    return Err(Error::invalid(
                        "torus needs 0 < minor_radius < major_radius",
                    ));
                }
            }
            ShapeKind::Composite { parts } => {
                if !allow_composite {
                    return Err(Error::invalid("composites cannot nest"));
                }
                if parts.len() < 2 || parts.len() > 5 {
                    return Err(Error::invalid("composites need 2 to 5 parts"));
                }
                for part in parts {
                    part.kind.validate(false)?;
                }
            }
        }
        Ok(())
    }

    /// Total surface area (used to allocate samples uniformly).
    fn area(&self) -> f64 {
        match self {
            ShapeKind::Sphere { radius } => 2.0 * std::f64::consts::TAU * radius * radius,
            ShapeKind::Cuboid { size } => {
                2.0 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2])
            }
            ShapeKind::Cylinder { radius, height } => {
                std::f64::consts::TAU * radius * height
                    + std::f64::consts::TAU * radius * radius
            }
            ShapeKind::Torus {
                major_radius,
                minor_radius,
            } => {
                std::f64::consts::TAU * std::f64::consts::TAU * major_radius * minor_radius
            }
            ShapeKind::Composite { parts } => parts.iter().map(|p| p.kind.area()).sum(),
        }
    }

    /// One uniform-area surface sample with its outward normal.
    fn sample_surface(&self, rng: &mut impl Rng) -> (Point3, Vector3<f64>) {
        match self {
            ShapeKind::Sphere { radius } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).max(0.0).sqrt();
                let normal = Vector3::new(r * phi.cos(), r * phi.sin(), z);
                (Point3::from_vector(normal * *radius), normal)
            }
            ShapeKind::Cuboid { size } => {
                let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
                // Face areas: +x/-x, +y/-y, +z/-z.
                let areas = [
                    size[1] * size[2],
                    size[1] * size[2],
                    size[0] * size[2],
                    size[0] * size[2],
                    size[0] * size[1],
                    size[0] * size[1],
                ];
                let total: f64 = areas.iter().sum();
                let mut u = rng.gen_range(0.0..total);
                let mut face = 0;
                for (f, &a) in areas.iter().enumerate() {
                    if u < a {
                        face = f;
                        break;
                    }
                    u -= a;
                }
                let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
                let mut p = [
                    rng.gen_range(-h[0]..=h[0]),
                    rng.gen_range(-h[1]..=h[1]),
                    rng.gen_range(-h[2]..=h[2]),
                ];
                p[axis] = sign * h[axis];
                let mut normal = Vector3::zeros();
                normal[axis] = sign;
                (Point3::new(p[0], p[1], p[2]), normal)
            }
            ShapeKind::Cylinder { radius, height } => {
                let lateral = std::f64::consts::TAU * radius * height;
                let cap = std::f64::consts::PI * radius * radius;
                let u = rng.gen_range(0.0..lateral + 2.0 * cap);
                if u < lateral {
                    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let z: f64 = rng.gen_range(-height / 2.0..=height / 2.0);
                    let normal = Vector3::new(phi.cos(), phi.sin(), 0.0);
                    (
                        Point3::new(radius * phi.cos(), radius * phi.sin(), z),
                        normal,
                    )
                } else {
                    let sign = if u < lateral + cap { 1.0 } else { -1.0 };
                    let rr = radius * rng.gen_range(0.0f64..=1.0).sqrt();
                    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    (
                        Point3::new(rr * phi.cos(), rr * phi.sin(), sign * height / 2.0),
                        Vector3::new(0.0, 0.0, sign),
                    )
                }
            }
            ShapeKind::Torus {
                major_radius,
                minor_radius,
            } => {
                // Rejection on the tube angle: area density is proportional
                // to major + minor*cos(theta).
                let (major, minor) = (*major_radius, *minor_radius);
                let theta = loop {
                    let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let accept: f64 = rng.gen_range(0.0..=1.0);
                    if accept <= (major + minor * t.cos()) / (major + minor) {
                        break t;
                    }
                };
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let ring = major + minor * theta.cos();
                let normal =
                    Vector3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin());
                (
                    Point3::new(ring * phi.cos(), ring * phi.sin(), minor * theta.sin()),
                    normal,
                )
            }
            ShapeKind::Composite { parts } => {
                let total: f64 = parts.iter().map(|p| p.kind.area()).sum();
                let mut u = rng.gen_range(0.0..total);
                for part in parts {
                    let a = part.kind.area();
                    if u < a {
                        let (p, n) = part.kind.sample_surface(rng);
                        return (
                            Point3::new(
                                p.x + part.offset[0],
                                p.y + part.offset[1],
                                p.z + part.offset[2],
                            ),
                            n,
                        );
                    }
                    u -= a;
                }
                // Rounding fallthrough: sample the last part.
                let part = parts.last().unwrap();
                let (p, n) = part.kind.sample_surface(rng);
                (
                    Point3::new(
                        p.x + part.offset[0],
                        p.y + part.offset[1],
                        p.z + part.offset[2],
                    ),
                    n,
                )
            }
        }
    }

    /// Distance-like residual of a point against the analytic surface
    /// (0 on the surface). For the torus this is the implicit-equation
    /// residual; for composites, the minimum over parts.
    pub fn surface_residual(&self, p: Point3) -> f64 {
        match self {
            ShapeKind::Sphere { radius } => (p.to_vector().norm() - radius).abs(),
            ShapeKind::Cuboid { size } => {
                let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
                let q = [p.x.abs() - h[0], p.y.abs() - h[1], p.z.abs() - h[2]];
                let outside =
                    (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2)).sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            ShapeKind::Cylinder { radius, height } => {
                let radial = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let axial = p.z.abs() - height / 2.0;
                let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
                let inside = radial.max(axial).min(0.0);
                (outside + inside).abs()
            }
            ShapeKind::Torus {
                major_radius,
                minor_radius,
            } => {
                let ring = (p.x * p.x + p.y * p.y).sqrt() - major_radius;
                (ring * ring + p.z * p.z - minor_radius * minor_radius).abs()
            }
            ShapeKind::Composite { parts } => parts
                .iter()
                .map(|part| {
                    part.kind.surface_residual(Point3::new(
                        p.x - part.offset[0],
                        p.y - part.offset[1],
                        p.z - part.offset[2],
                    ))
                })
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// A sampled analytic surface: the cloud plus the exact outward normal per
/// point (used for visibility tests and oracles).
#[derive(Debug, Clone)]
pub struct SurfaceCloud {
    pub cloud: PointCloud,
    pub normals: Vec<Vector3<f64>>,
    pub spec: ShapeSpec,
}

/// Uniform-area surface sampling, deterministic per seed.
pub fn synth_shape(spec: &ShapeSpec, seed: u64) -> Result<SurfaceCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(spec.points);
    let mut normals = Vec::with_capacity(spec.points);
    for _ in 0..spec.points {
        let (p, n) = spec.kind.sample_surface(&mut rng);
        points.push(p);
        normals.push(n);
    }
    Ok(SurfaceCloud {
        cloud: PointCloud::new(points)?,
        normals,
        spec: spec.clone(),
    })
}

/// A camera view: points whose outward normal faces the camera survive,
/// then subsampling, isotropic Gaussian noise, and bounding-box outliers
/// are applied.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewSpec {
    /// Viewing direction (from the camera toward the object); normalized
    /// at use.
    pub direction: [f64; 3],
    pub keep_fraction: f64,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
}

impl ViewSpec {
    pub fn validate(&self) -> Result<()> {
        let norm = Vector3::from(self.direction).norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("view direction must be a nonzero vector"));
        }
        for (name, v) in [
            ("keep_fraction", self.keep_fraction),
            ("outlier_fraction", self.outlier_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Select `k` of `n` indices without replacement (partial Fisher-Yates),
/// returned in ascending order so the original point order survives.
fn choose_indices(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.gen_range(i..n);
        all.swap(i, j);
    }
    let mut picked = all[..k.min(n)].to_vec();
    picked.sort_unstable();
    picked
}

/// Render one partial view of a surface: front-facing visibility, seeded
/// subsampling, Gaussian noise, and outlier injection.
pub fn partial_view(surface: &SurfaceCloud, view: &ViewSpec, seed: u64) -> Result<PointCloud> {
    view.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = Vector3::from(view.direction).normalize();

    let visible: Vec<usize> = (0..surface.cloud.len())
        .filter(|&i| surface.normals[i].dot(&-direction) > 0.0)
        .collect();
    if visible.is_empty() {
        return Err(Error::invalid(
            "partial view is empty: no surface point faces the camera",
        ));
    }

    let keep = ((view.keep_fraction * visible.len() as f64).round() as usize)
        .clamp(1, visible.len());
    let chosen = choose_indices(visible.len(), keep, &mut rng);
    let mut points: Vec<Point3> = chosen
        .iter()
        .map(|&ci| surface.cloud.point(visible[ci]))
        .collect();

    if view.noise_sigma > 0.0 {
        for p in &mut points {
            *p = Point3::new(
                p.x + view.noise_sigma * standard_normal(&mut rng),
                p.y + view.noise_sigma * standard_normal(&mut rng),
                p.z + view.noise_sigma * standard_normal(&mut rng),
            );
        }
    }

    let outliers = (view.outlier_fraction * points.len() as f64).round() as usize;
    if outliers > 0 {
        let (lo, hi) = surface.cloud.bounding_box();
        let slots = choose_indices(points.len(), outliers, &mut rng);
        for slot in slots {
            points[slot] = Point3::new(
                rng.gen_range(lo.x..=hi.x),
                rng.gen_range(lo.y..=hi.y),
                rng.gen_range(lo.z..=hi.z),
            );
        }
    }

    PointCloud::new(points)
}

/// Parameters for generated registration pairs and sequences.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenParams {
    pub keep_fraction: f64,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Maximum rotation angle of the pair transform, degrees.
    pub max_angle_deg: f64,
    /// Translations are uniform in `[-max_translation, max_translation]^3`.
    pub max_translation: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            keep_fraction: 0.7,
            noise_sigma: 0.002,
            outlier_fraction: 0.02,
            max_angle_deg: 45.0,
            max_translation: 0.5,
        }
    }
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Uniform-axis rotation with angle uniform in `[0, max_angle]`, plus a
/// uniform translation in the configured box.
pub fn random_transform_up_to(
    max_angle_deg: f64,
    max_translation: f64,
    rng: &mut impl Rng,
) -> RigidTransform {
    let axis = random_unit(rng);
    let angle = rng.gen_range(0.0..=max_angle_deg.max(0.0)).to_radians();
    let t = Vector3::new(
        rng.gen_range(-max_translation..=max_translation),
        rng.gen_range(-max_translation..=max_translation),
        rng.gen_range(-max_translation..=max_translation),
    );
    RigidTransform::from_axis_angle(axis, angle, t).expect("axis is unit length")
}

/// A registration example: two partial views of one shape, the target
/// transformed by a known rigid motion.
#[derive(Debug, Clone)]
pub struct RgPair {
    pub src: PointCloud,
    pub tgt: PointCloud,
    pub t_gt: RigidTransform,
}

/// Build one registration pair.
pub fn make_rg_pair(spec: &ShapeSpec, params: &GenParams, seed: u64) -> Result<RgPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let surface = synth_shape(spec, seed)?;
    let dir1 = random_unit(&mut rng);
    let dir2 = random_unit(&mut rng);
    let view = |dir: Vector3<f64>| ViewSpec {
        direction: [dir.x, dir.y, dir.z],
        keep_fraction: params.keep_fraction,
        noise_sigma: params.noise_sigma,
        outlier_fraction: params.outlier_fraction,
    };
    let src = partial_view(&surface, &view(dir1), rng.gen())?;
    let tgt_shape_frame = partial_view(&surface, &view(dir2), rng.gen())?;
    let t_gt = if params.max_angle_deg == 0.0 && params.max_translation == 0.0 {
        RigidTransform::identity()
    } else {
        random_transform_up_to(params.max_angle_deg, params.max_translation, &mut rng)
    };
    let tgt = apply_transform(&tgt_shape_frame, &t_gt);
    Ok(RgPair { src, tgt, t_gt })
}

/// A sampling example: several exactly-registered views stacked together,
/// with a clean uniform resample of the surface as ground truth.
#[derive(Debug, Clone)]
pub struct SpStack {
    pub stacked: PointCloud,
    pub gt_cloud: PointCloud,
}

/// Build one stacked sampling input from `frame_count >= 1` views.
pub fn make_sp_stack(
    spec: &ShapeSpec,
    frame_count: usize,
    params: &GenParams,
    seed: u64,
) -> Result<SpStack> {
    if frame_count == 0 {
        return Err(Error::invalid("a stack needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851f42d4c957f2d);
    let surface = synth_shape(spec, seed)?;
    let mut stacked: Option<PointCloud> = None;
    for _ in 0..frame_count {
        let dir = random_unit(&mut rng);
        let view = ViewSpec {
            direction: [dir.x, dir.y, dir.z],
            keep_fraction: params.keep_fraction,
            noise_sigma: params.noise_sigma,
            outlier_fraction: params.outlier_fraction,
        };
        let frame = partial_view(&surface, &view, rng.gen())?;
        stacked = Some(match stacked {
            Some(acc) => acc.concat(&frame),
            None => frame,
        });
    }
    // Clean, noise-free resample as the ground truth.
    let gt = synth_shape(spec, seed.wrapping_add(1))?;
    Ok(SpStack {
        stacked: stacked.unwrap(),
        gt_cloud: gt.cloud,
    })
}

/// A generated sequence with its exact poses and ground-truth model.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub sequence: FrameSequence,
    pub gt_model: PointCloud,
}

/// Build a frame sequence: views along a smooth orbit, each frame expressed
/// in its own sensor frame, with the exact frame-to-world pose recorded.
pub fn make_sequence(
    spec: &ShapeSpec,
    frame_count: usize,
    params: &GenParams,
    seed: u64,
) -> Result<SyntheticSequence> {
    if frame_count < 2 {
        return Err(Error::invalid("a sequence needs at least two frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545f4914f6cdd1d);
    let surface = synth_shape(spec, seed)?;

    // Orbit geometry: view directions rotate about a fixed axis; the sensor
    // pose rotates with them and drifts along a line.
    let axis = random_unit(&mut rng);
    let mut dir0 = random_unit(&mut rng);
    dir0 = (dir0 - axis * dir0.dot(&axis)).normalize();
    let step_deg: f64 = 30.0;
    let drift = random_unit(&mut rng) * 0.05;

    let mut frames = Vec::with_capacity(frame_count);
    let mut poses = Vec::with_capacity(frame_count);
    for k in 0..frame_count {
        let angle = (k as f64) * step_deg.to_radians();
        let rot = RigidTransform::from_axis_angle(axis, angle, Vector3::zeros())
            .expect("unit axis");
        let dir = rot.rotation() * dir0;
        let view = ViewSpec {
            direction: [dir.x, dir.y, dir.z],
            keep_fraction: params.keep_fraction,
            noise_sigma: params.noise_sigma,
            outlier_fraction: params.outlier_fraction,
        };
        let world_view = partial_view(&surface, &view, rng.gen())?;
        let pose = RigidTransform::from_axis_angle(axis, angle, drift * k as f64)
            .expect("unit axis");
        frames.push(apply_transform(&world_view, &pose.invert()));
        poses.push(pose);
    }

    let gt = synth_shape(spec, seed.wrapping_add(1))?;
    Ok(SyntheticSequence {
        sequence: FrameSequence {
            frames,
            poses_gt: Some(poses),
            metadata: SequenceMetadata::default(),
        },
        gt_model: gt.cloud,
    })
}

// ---------------------------------------------------------------------------
// The frozen standard suite
// ---------------------------------------------------------------------------

/// Seeds of the standard synthetic suite (v1).
pub const SUITE_SEEDS: [u64; 4] = [11, 23, 37, 53];

/// Frames per stacked sampling input in the standard suite.
pub const SUITE_STACK_FRAMES: usize = 4;

/// Frames per sequence in the standard suite.
pub const SUITE_SEQUENCE_FRAMES: usize = 6;

/// Per-instance seed of the standard suite: mixes the suite seed with the
/// shape index so different shapes never share a draw sequence.
pub fn suite_instance_seed(shape_idx: usize, suite_seed: u64) -> u64 {
    suite_seed ^ ((shape_idx as u64 + 1) << 32)
}

/// The eight shape specifications of the standard synthetic suite (v1).
/// Acceptance thresholds reference exactly these shapes and seeds.
pub fn standard_suite_shapes() -> Vec<ShapeSpec> {
    let n = 512;
    vec![
        ShapeSpec {
            kind: ShapeKind::Sphere { radius: 0.5 },
            points: n,
        },
        ShapeSpec {
            kind: ShapeKind::Cuboid {
                size: [1.0, 0.6, 0.8],
            },
            points: n,
        },
        ShapeSpec {
            kind: ShapeKind::Cylinder {
                radius: 0.3,
                height: 1.0,
            },
            points: n,
        },
        ShapeSpec {
            kind: ShapeKind::Torus {
                major_radius: 0.5,
                minor_radius: 0.15,
            },
            points: n,
        },
        ShapeSpec {
            kind: ShapeKind::Composite {
                parts: vec![
                    CompositePart {
                        kind: ShapeKind::Cuboid {
                            size: [0.8, 0.8, 0.4],
                        },
                        offset: [0.0, 0.0, 0.0],
                    },
                    CompositePart {
                        kind: ShapeKind::Sphere { radius: 0.25 },
                        offset: [0.0, 0.0, 0.45],
                    },
                ],
            },
            points: n,
        },
        ShapeSpec {
            kind: ShapeKind::Composite {
                parts: vec![
                    CompositePart {
                        kind: ShapeKind::Sphere { radius: 0.15 },
                        offset: [-0.5, 0.0, 0.0],
                    },
                    CompositePart {
                        kind: ShapeKind::Sphere { radius: 0.25 },
                        offset: [0.0, 0.0, 0.1],
                    },
                    CompositePart {
                        kind: ShapeKind::Sphere { radius: 0.2 },
                        offset: [0.5, 0.1, -0.05],
                    },
                ],
            },
            points: n,
        },
        ShapeSpec {
            kind: ShapeKind::Cylinder {
                radius: 0.15,
                height: 1.2,
            },
            points: n,
        },
        ShapeSpec {
            kind: ShapeKind::Composite {
                parts: vec![
                    CompositePart {
                        kind: ShapeKind::Cuboid {
                            size: [1.0, 0.6, 0.1],
                        },
                        offset: [0.0, 0.0, 0.4],
                    },
                    CompositePart {
                        kind: ShapeKind::Cylinder {
                            radius: 0.06,
                            height: 0.8,
                        },
                        offset: [-0.4, -0.2, 0.0],
                    },
                    CompositePart {
                        kind: ShapeKind::Cylinder {
                            radius: 0.09,
                            height: 0.6,
                        },
                        offset: [0.4, 0.1, 0.1],
                    },
                ],
            },
            points: n,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer_distance;

    fn sphere_spec(points: usize) -> ShapeSpec {
        ShapeSpec {
            kind: ShapeKind::Sphere { radius: 1.0 },
            points,
        }
    }

    #[test]
    fn sphere_points_on_radius() {
        let surface = synth_shape(&sphere_spec(1024), 7).unwrap();
        for &p in surface.cloud.iter() {
            assert!((p.to_vector().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn box_points_on_faces() {
        let spec = ShapeSpec {
            kind: ShapeKind::Cuboid {
                size: [1.0, 1.0, 1.0],
            },
            points: 1024,
        };
        let surface = synth_shape(&spec, 11).unwrap();
        for &p in surface.cloud.iter() {
            let on_face = (p.x.abs() - 0.5).abs() < 1e-9
                || (p.y.abs() - 0.5).abs() < 1e-9
                || (p.z.abs() - 0.5).abs() < 1e-9;
            assert!(on_face, "point {p:?} not on a face");
            assert!(spec.kind.surface_residual(p) < 1e-9);
        }
    }

    #[test]
    fn torus_implicit_residual() {
        let spec = ShapeSpec {
            kind: ShapeKind::Torus {
                major_radius: 1.0,
                minor_radius: 0.3,
            },
            points: 2048,
        };
        let surface = synth_shape(&spec, 13).unwrap();
        for &p in surface.cloud.iter() {
            assert!(
                spec.kind.surface_residual(p) < 1e-9,
                "implicit residual too large at {p:?}"
            );
        }
    }

    #[test]
    fn all_suite_shapes_generate_and_lie_on_surface() {
        for (si, spec) in standard_suite_shapes().iter().enumerate() {
            let surface = synth_shape(spec, 17).unwrap();
            assert_eq!(surface.cloud.len(), spec.points);
            for &p in surface.cloud.iter() {
                assert!(
                    spec.kind.surface_residual(p) < 1e-9,
                    "suite shape {si}: off-surface point"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = sphere_spec(256);
        let a = synth_shape(&spec, 99).unwrap();
        let b = synth_shape(&spec, 99).unwrap();
        assert_eq!(a.cloud, b.cloud);
        let c = synth_shape(&spec, 100).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn partial_view_respects_half_space() {
        let surface = synth_shape(&sphere_spec(512), 3).unwrap();
        let view = ViewSpec {
            direction: [0.0, 0.0, -1.0],
            keep_fraction: 1.0,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
        };
        let cloud = partial_view(&surface, &view, 5).unwrap();
        // Unit sphere: the outward normal equals the position, so visible
        // points satisfy dot(p, -direction) > 0.
        for &p in cloud.iter() {
            assert!(p.to_vector().dot(&Vector3::new(0.0, 0.0, 1.0)) > 0.0);
        }
        // Full keep fraction with no noise: exactly the visible subset.
        let visible = surface
            .cloud
            .iter()
            .filter(|p| p.z > 0.0)
            .count();
        assert_eq!(cloud.len(), visible);
    }

    #[test]
    fn overlap_matches_spherical_cap_geometry() {
        // Two hemisphere views 30 degrees apart share a lune whose area
        // fraction (relative to one hemisphere) is 1 - angle/pi.
        let surface = synth_shape(&sphere_spec(20000), 19).unwrap();
        let angle: f64 = 30f64.to_radians();
        let d1 = Vector3::new(0.0, 0.0, -1.0);
        let d2 = Vector3::new(angle.sin(), 0.0, -angle.cos());
        let keep = |dir: Vector3<f64>| ViewSpec {
            direction: [dir.x, dir.y, dir.z],
            keep_fraction: 1.0,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
        };
        let v1 = partial_view(&surface, &keep(d1), 1).unwrap();
        let v2 = partial_view(&surface, &keep(d2), 2).unwrap();
        // Count points of v1 present in v2 (identical coordinates).
        let mut shared = 0usize;
        for &p in v1.iter() {
            if v2.iter().any(|&q| p.dist2(q) < 1e-12) {
                shared += 1;
            }
        }
        let measured = shared as f64 / v1.len() as f64;
        let analytic = 1.0 - angle / std::f64::consts::PI;
        assert!(
            (measured - analytic).abs() / analytic < 0.05,
            "overlap {measured:.4} vs analytic {analytic:.4}"
        );
    }

    #[test]
    fn empty_view_is_an_error() {
        // A "surface" with all normals pointing +z seen from behind.
        let spec = ShapeSpec {
            kind: ShapeKind::Cuboid {
                size: [1.0, 1.0, 1.0],
            },
            points: 64,
        };
        let mut surface = synth_shape(&spec, 23).unwrap();
        for n in &mut surface.normals {
            *n = Vector3::new(0.0, 0.0, 1.0);
        }
        let view = ViewSpec {
            direction: [0.0, 0.0, 1.0],
            keep_fraction: 1.0,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
        };
        assert!(partial_view(&surface, &view, 1).is_err());
    }

    #[test]
    fn rg_pair_identity_when_motion_disabled() {
        let spec = sphere_spec(256);
        let params = GenParams {
            max_angle_deg: 0.0,
            max_translation: 0.0,
            ..GenParams::default()
        };
        let pair = make_rg_pair(&spec, &params, 31).unwrap();
        assert_eq!(pair.t_gt, RigidTransform::identity());
    }

    #[test]
    fn rg_pair_ground_truth_aligns_the_views() {
        let spec = sphere_spec(512);
        let params = GenParams {
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            ..GenParams::default()
        };
        let pair = make_rg_pair(&spec, &params, 37).unwrap();
        // Transforming the source by the ground truth must land it near the
        // target's surface region (both are subsets of the same sphere).
        let moved = apply_transform(&pair.src, &pair.t_gt);
        let inv = pair.t_gt.invert();
        for &p in moved.iter() {
            let back = inv.apply_point(p);
            assert!((back.to_vector().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sp_stack_single_frame_is_that_frame() {
        let spec = sphere_spec(128);
        let params = GenParams::default();
        let stack = make_sp_stack(&spec, 1, &params, 41).unwrap();
        assert!(stack.stacked.len() <= 128);
        assert_eq!(stack.gt_cloud.len(), 128);
        // One frame: stacked equals a partial view (fewer points than the
        // full surface).
        assert!(stack.stacked.len() < stack.gt_cloud.len());
    }

    #[test]
    fn sequence_poses_invert_the_view_transforms() {
        let spec = sphere_spec(400);
        let params = GenParams {
            noise_sigma: 0.001,
            outlier_fraction: 0.0,
            ..GenParams::default()
        };
        let seq = make_sequence(&spec, 4, &params, 43).unwrap();
        let poses = seq.sequence.poses_gt.as_ref().unwrap();
        assert_eq!(poses.len(), 4);
        for (frame, pose) in seq.sequence.frames.iter().zip(poses) {
            let world = apply_transform(frame, pose);
            for &p in world.iter() {
                // Back on the unit sphere within noise plus slack.
                assert!(
                    (p.to_vector().norm() - 1.0).abs() < params.noise_sigma * 6.0 + 1e-9,
                    "registered frame point strayed from the surface"
                );
            }
        }
    }

    #[test]
    fn stacking_views_lowers_chamfer_to_surface() {
        let spec = sphere_spec(512);
        let params = GenParams {
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            ..GenParams::default()
        };
        let one = make_sp_stack(&spec, 1, &params, 47).unwrap();
        let four = make_sp_stack(&spec, 4, &params, 47).unwrap();
        let c1 = chamfer_distance(&one.stacked, &one.gt_cloud);
        let c4 = chamfer_distance(&four.stacked, &four.gt_cloud);
        assert!(c4 < c1, "stacking should cover more of the surface");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ShapeSpec {
            kind: ShapeKind::Sphere { radius: -1.0 },
            points: 10
        }
        .validate()
        .is_err());
        assert!(ShapeSpec {
            kind: ShapeKind::Torus {
                major_radius: 0.2,
                minor_radius: 0.5
            },
            points: 10
        }
        .validate()
        .is_err());
        assert!(ShapeSpec {
            kind: ShapeKind::Composite { parts: vec![] },
            points: 10
        }
        .validate()
        .is_err());
    }
}
