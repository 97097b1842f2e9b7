//! Geometric core for multi-part assembly pose estimation.
//!
//! The crate covers the full desk-scale pipeline: canonical normalization and
//! surface sampling of part meshes, assembly-order inference, per-step
//! fixed/moving point clouds, an SE(3)-equivariant Vector Neuron encoder with
//! a pose projector and its warm-up trainer, the discrete 9-token pose codec,
//! and the evaluation metrics (RMSE(T), SCD, success rate).

pub mod codec;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod planner;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{PointCloud, RigidTransform};
pub use mesh::TriangleMesh;

/// Connectivity threshold in canonical units.
pub const DEFAULT_TAU: f64 = 0.06;
/// Points sampled per part before farthest point sampling.
pub const DEFAULT_POINTS_COARSE: usize = 10240;
/// Points per fixed/moving cloud fed to the encoder.
pub const DEFAULT_POINTS: usize = 1024;
/// Success threshold on the symmetric Chamfer distance.
pub const DEFAULT_SR_THRESHOLD: f64 = 0.02;
