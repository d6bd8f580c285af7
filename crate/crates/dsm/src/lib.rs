//! High-precision 3D surface modeling from sparse point cloud frames.
//!
//! The library merges a sequence of sparse, partial point cloud frames into
//! a single precise model by alternating two learned stages in a cycle:
//!
//! * **registration** ([`pcr`]) — density-aware alignment of each frame to
//!   the current model via multi-horizon cross-attention, a soft
//!   similarity matrix and RANSAC;
//! * **sampling** ([`pcs`]) — geometry-aware consolidation of the merged
//!   cloud back to a fixed budget via multi-resolution self-attention and
//!   point-wise position regression.
//!
//! Each cycle emits three per-point weighting maps (registration
//! significance, geometry significance, neighborhood distribution
//! consistency) that are fused and fed back into the next cycle's
//! attention, down-weighting low-utility points ([`pipeline`]).
//!
//! Supporting layers: exact geometric primitives and metrics
//! ([`geometry`]), file formats ([`io`]), a minimal dense-array neural
//! runtime with hand-verified gradients ([`nn`]), the feature-distribution
//! encoder ([`encoder`]), synthetic benchmark construction ([`synth`]) and
//! the evaluation suite ([`eval`]).

pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pcr;
pub mod pcs;
pub mod pipeline;
pub mod synth;

mod book;

pub use error::{Error, Result};
