//! VTPNet: voxel, point-transformer and point branches fused into one block,
//! with the segmentation and classification backbones built from it.

pub mod attention;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod network;
pub mod nn;
pub mod training;
pub mod vtp;

pub use error::{Error, Result};
