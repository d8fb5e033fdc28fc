//! Hierarchical implicit LiDAR SLAM on a sparse multi-level octree of
//! learnable corner features.
//!
//! The map is a sum of per-level decoders over trilinearly weighted corner
//! features ([`network::NeuralMap`]). It is trained scan by scan on
//! projective signed-distance samples ([`mapping`]), and every new scan is
//! registered against it by coarse-to-fine gradient descent on an SE(3)
//! twist ([`pose`]). [`pipeline`] ties the two together; [`mesh`] and
//! [`eval`] turn results into meshes and metrics.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod mapping;
pub mod mesh;
pub mod network;
pub mod pipeline;
pub mod pose;
pub mod sampling;
pub mod se3;
pub mod synth;

pub use error::{Error, Result};
pub use field::{FeatureOctree, LevelSpec, OctreeConfig};
pub use network::{LevelMask, LevelMlp, NeuralMap};
pub use se3::{Pose, Twist};
