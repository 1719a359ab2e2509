//! Planning stack for autonomous aerial filming.
//!
//! The pipeline: a spinning LiDAR feeds an 8-bit log-odds occupancy grid
//! ([`grid`]), grid changes stream into an incrementally maintained truncated
//! signed distance field ([`sdf`]), the filmed actor's motion is tracked and
//! rolled out ([`forecast`]), and a covariant gradient optimizer shapes the
//! drone trajectory against shot, safety, and occlusion objectives
//! ([`planner`]). A deterministic simulator ([`sim`]) and a closed-loop
//! harness ([`harness`]) tie the pieces together for benchmark runs.

pub mod forecast;
pub mod geom;
pub mod grid;
pub mod harness;
pub mod planner;
pub mod scenario;
pub mod sdf;
pub mod sim;

pub use geom::{Aabb, Voxel};
