//! Pose file I/O: one frame per line, 12 space-separated decimals — the
//! row-major 3×3 rotation followed by the translation. This mirrors the
//! common LiDAR odometry convention so external pose estimates can be
//! ingested directly.

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use nalgebra::{Matrix3, Vector3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Serialize one pose as its 12-number line.
pub fn pose_line(t: &RigidTransform) -> String {
    let r = t.rotation();
    let tr = t.translation();
    format!(
        "{:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        tr.x,
        tr.y,
        tr.z
    )
}

/// Parse a 12-number pose line. The rotation is validated like any other
/// [`RigidTransform`], at a relaxed tolerance to absorb the 12-decimal
/// serialization.
pub fn parse_pose_line(line: &str) -> std::result::Result<RigidTransform, String> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| format!("invalid number `{s}`")))
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != 12 {
        return Err(format!("expected 12 numbers, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".to_string());
    }
    let rotation = Matrix3::new(
        values[0], values[1], values[2], values[3], values[4], values[5], values[6], values[7],
        values[8],
    );
    let translation = Vector3::new(values[9], values[10], values[11]);
    // Re-orthonormalize through a quaternion so truncation in the text form
    // cannot accumulate into an invalid rotation.
    let ortho_err = (rotation.transpose() * rotation - Matrix3::identity())
        .abs()
        .max();
    if ortho_err > 1e-6 {
        return Err(format!("rotation not orthonormal (deviation {ortho_err:.3e})"));
    }
    if (rotation.determinant() - 1.0).abs() > 1e-6 {
        return Err(format!("rotation determinant {} != +1", rotation.determinant()));
    }
    let q = nalgebra::UnitQuaternion::from_matrix(&rotation);
    RigidTransform::new(q.to_rotation_matrix().into_inner(), translation)
        .map_err(|e| e.to_string())
}

/// Write poses, one line per frame.
pub fn write_poses(poses: &[RigidTransform], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in poses {
        writeln!(w, "{}", pose_line(t))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a pose file written by [`write_poses`].
pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut poses = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pose = parse_pose_line(&line).map_err(|message| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error_deg, translation_error};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

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
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ),
        )
        .unwrap()
    }

    #[test]
    fn identity_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        write_poses(&[RigidTransform::identity()], &path).unwrap();
        let back = read_poses(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], RigidTransform::identity());
    }

    #[test]
    fn ten_random_poses_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let mut rng = StdRng::seed_from_u64(3);
        let poses: Vec<RigidTransform> = (0..10).map(|_| random_transform(&mut rng)).collect();
        write_poses(&poses, &path).unwrap();
        let back = read_poses(&path).unwrap();
        assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(back.iter()) {
            let rot_err = (a.rotation() - b.rotation()).abs().max();
            assert!(rot_err < 1e-9, "rotation element error {rot_err}");
            assert!(rotation_error_deg(a.rotation(), b.rotation()) < 1e-7);
            assert!(translation_error(a.translation(), b.translation()) < 1e-9);
        }
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in [
            "1 0 0 0 1 0 0 0 1 0 0", // 11 numbers
            "1 0 0 0 1 0 0 0 1 0 0 x",
            "2 0 0 0 2 0 0 0 2 0 0 0", // not a rotation
        ] {
            assert!(parse_pose_line(bad).is_err(), "should reject `{bad}`");
        }
    }
}
