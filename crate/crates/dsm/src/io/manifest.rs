//! Run manifests: a JSON document naming the input frames, optional ground
//! truth, the output directory, and the full pipeline configuration.
//! Written manifests are self-describing — every hyperparameter is present
//! with its value, so a run can be reproduced from the manifest alone.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::io::{read_ply, read_poses};
use crate::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Descriptive tags carried alongside a frame sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceMetadata {
    pub source: String,
    pub sensor: String,
    pub units: String,
}

impl Default for SequenceMetadata {
    fn default() -> Self {
        SequenceMetadata {
            source: "synthetic".to_string(),
            sensor: "synthetic".to_string(),
            units: "meters".to_string(),
        }
    }
}

/// The sequence section of a manifest: frame files in acquisition order and
/// an optional ground-truth pose file (frame-to-world).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceSpec {
    pub frames: Vec<String>,
    pub poses_gt: Option<String>,
    #[serde(default)]
    pub metadata: SequenceMetadata,
}

/// Manifest of a modeling run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub sequence: SequenceSpec,
    /// Ground-truth model cloud for evaluation, if available.
    pub gt_model: Option<String>,
    pub output_dir: String,
    pub pipeline: PipelineConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            sequence: SequenceSpec {
                frames: Vec::new(),
                poses_gt: None,
                metadata: SequenceMetadata::default(),
            },
            gt_model: None,
            output_dir: "out".to_string(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let manifest: RunManifest = serde_json::from_str(&text)?;
        Ok(manifest)
    }
}

/// A loaded frame sequence: clouds in acquisition order plus optional
/// ground-truth frame-to-world poses (one per frame when present).
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<PointCloud>,
    pub poses_gt: Option<Vec<RigidTransform>>,
    pub metadata: SequenceMetadata,
}

fn resolve(base: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load the frames (and poses, when listed) referenced by a manifest.
/// Relative paths resolve against the manifest's directory. Errors name
/// the offending entry.
pub fn read_sequence(manifest_path: &Path) -> Result<(FrameSequence, RunManifest)> {
    let manifest = RunManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    if manifest.sequence.frames.is_empty() {
        return Err(Error::ManifestEntry {
            entry: "sequence.frames".to_string(),
            message: "no frames listed".to_string(),
        });
    }

    let mut frames = Vec::with_capacity(manifest.sequence.frames.len());
    for name in &manifest.sequence.frames {
        let path = resolve(base, name);
        let cloud = read_ply(&path).map_err(|e| Error::ManifestEntry {
            entry: name.clone(),
            message: e.to_string(),
        })?;
        frames.push(cloud);
    }

    let poses_gt = match &manifest.sequence.poses_gt {
        Some(name) => {
            let path = resolve(base, name);
            let poses = read_poses(&path).map_err(|e| Error::ManifestEntry {
                entry: name.clone(),
                message: e.to_string(),
            })?;
            if poses.len() != frames.len() {
                return Err(Error::ManifestEntry {
                    entry: name.clone(),
                    message: format!(
                        "pose count {} does not match frame count {}",
                        poses.len(),
                        frames.len()
                    ),
                });
            }
            Some(poses)
        }
        None => None,
    };

    Ok((
        FrameSequence {
            frames,
            poses_gt,
            metadata: manifest.sequence.metadata.clone(),
        },
        manifest,
    ))
}
