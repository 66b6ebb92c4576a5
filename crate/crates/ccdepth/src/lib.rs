//! CCDepth: hybrid CNN + CRATE self-supervised monocular depth estimation.
//!
//! The depth network is a 10-layer U-Net whose middle stages are CRATE
//! (rate-reduction transformer) layers built from multi-head subspace
//! self-attention and ISTA sparse-coding blocks. Training is fully
//! self-supervised from monocular triplets via view synthesis.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crate_core;
pub mod depth_net;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod kitti_data;
pub mod linalg;
pub mod params;
pub mod pose_net;
pub mod selfsup_loss;
pub mod tape;
pub mod trainer;

pub use error::{CcError, Result};
