//! Pose solvers: Kabsch and EPnP inside seeded RANSAC, plus ICP refinement.

mod icp;
mod kabsch;
mod pnp;
mod ransac;

pub use icp::{icp_refine, IcpConfig};
pub use kabsch::{kabsch, sum_squared_residual};
pub use pnp::{mean_reprojection_error, pnp, refine_reprojection, reprojection_error};
pub use ransac::{ransac, Match3d3d, Matches, PoseEstimate, RansacConfig, Refinement, Solver};
