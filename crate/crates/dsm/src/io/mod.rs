//! File formats: ASCII PLY clouds, 12-number pose lines, JSON run
//! manifests, and parameter checkpoints.

mod dataset;
mod manifest;
mod ply;
mod poses;

pub use dataset::{
    load_rg_pair, load_sp_stack, load_train_dataset, save_rg_pair, save_sequence, save_sp_stack,
};
pub use manifest::{read_sequence, FrameSequence, RunManifest, SequenceMetadata, SequenceSpec};
pub use ply::{read_ply, write_ply};
pub use poses::{parse_pose_line, pose_line, read_poses, write_poses};
