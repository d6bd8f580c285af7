//! On-disk layout of generated training/evaluation data.
//!
//! A dataset directory holds `pair_NNNN/` entries (src.ply, tgt.ply,
//! pose_gt.txt), `stack_NNNN/` entries (stacked.ply, gt.ply) and
//! `seq_NNNN/` entries (frames, poses, ground-truth model, manifest).

use crate::error::{Error, Result};
use crate::io::{
    read_ply, read_poses, write_ply, write_poses, RunManifest, SequenceMetadata, SequenceSpec,
};
use crate::pipeline::{PipelineConfig, TrainDataset};
use crate::synth::{RgPair, SpStack, SyntheticSequence};
use std::path::Path;

pub fn save_rg_pair(dir: &Path, pair: &RgPair) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_ply(&pair.src, &dir.join("src.ply"))?;
    write_ply(&pair.tgt, &dir.join("tgt.ply"))?;
    write_poses(std::slice::from_ref(&pair.t_gt), &dir.join("pose_gt.txt"))?;
    Ok(())
}

pub fn load_rg_pair(dir: &Path) -> Result<RgPair> {
    let src = read_ply(&dir.join("src.ply"))?;
    let tgt = read_ply(&dir.join("tgt.ply"))?;
    let poses = read_poses(&dir.join("pose_gt.txt"))?;
    let t_gt = poses.into_iter().next().ok_or_else(|| Error::Parse {
        path: dir.join("pose_gt.txt").display().to_string(),
        line: 1,
        message: "expected one pose line".to_string(),
    })?;
    Ok(RgPair { src, tgt, t_gt })
}

pub fn save_sp_stack(dir: &Path, stack: &SpStack) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_ply(&stack.stacked, &dir.join("stacked.ply"))?;
    write_ply(&stack.gt_cloud, &dir.join("gt.ply"))?;
    Ok(())
}

pub fn load_sp_stack(dir: &Path) -> Result<SpStack> {
    Ok(SpStack {
        stacked: read_ply(&dir.join("stacked.ply"))?,
        gt_cloud: read_ply(&dir.join("gt.ply"))?,
    })
}

/// Write a synthetic sequence as frames + poses + ground truth + manifest,
/// ready for `dsm model`.
pub fn save_sequence(dir: &Path, seq: &SyntheticSequence, config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut frame_names = Vec::new();
    for (k, frame) in seq.sequence.frames.iter().enumerate() {
        let name = format!("frame_{k:03}.ply");
        write_ply(frame, &dir.join(&name))?;
        frame_names.push(name);
    }
    if let Some(poses) = &seq.sequence.poses_gt {
        write_poses(poses, &dir.join("poses_gt.txt"))?;
    }
    write_ply(&seq.gt_model, &dir.join("gt_model.ply"))?;
    let manifest = RunManifest {
        sequence: SequenceSpec {
            frames: frame_names,
            poses_gt: seq
                .sequence
                .poses_gt
                .as_ref()
                .map(|_| "poses_gt.txt".to_string()),
            metadata: SequenceMetadata::default(),
        },
        gt_model: Some("gt_model.ply".to_string()),
        output_dir: "out".to_string(),
        pipeline: config.clone(),
    };
    manifest.save(&dir.join("manifest.json"))
}

/// Load every `pair_*/` and `stack_*/` entry under a dataset directory, in
/// name order.
pub fn load_train_dataset(dir: &Path) -> Result<TrainDataset> {
    let mut pair_dirs = Vec::new();
    let mut stack_dirs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("pair_") {
            pair_dirs.push(entry.path());
        } else if name.starts_with("stack_") {
            stack_dirs.push(entry.path());
        }
    }
    pair_dirs.sort();
    stack_dirs.sort();
    let mut dataset = TrainDataset::default();
    for p in pair_dirs {
        dataset.pairs.push(load_rg_pair(&p)?);
    }
    for s in stack_dirs {
        dataset.stacks.push(load_sp_stack(&s)?);
    }
    if dataset.pairs.is_empty() && dataset.stacks.is_empty() {
        return Err(Error::invalid(format!(
            "no pair_*/ or stack_*/ entries under {}",
            dir.display()
        )));
    }
    Ok(dataset)
}
