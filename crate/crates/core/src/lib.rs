//! Unsupervised semantic segmentation of 3D scenes.
//!
//! The pipeline over-segments each scene into superpoints, extracts
//! per-point features with a small volumetric convolutional network, and
//! trains that network on its own superpoint-constrained cluster
//! assignments using two differently transformed views of every block.

pub mod cloud;
pub mod cluster;
pub mod config;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod network;
pub mod pipeline;
pub mod superpoint;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use cloud::{Block, PointCloud};
pub use cluster::{CentroidSet, PseudoLabels};
pub use config::Config;
pub use error::{Error, Result};
pub use eval::ConfusionMatrix;
pub use network::NetworkParams;
pub use superpoint::SuperpointPartition;
pub use tensor::Matrix;
pub use voxel::VoxelGrid;
