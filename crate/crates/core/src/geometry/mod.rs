//! Rigid-body math, pinhole camera, triangle meshes and NOCS encoding.
//!
//! Units are millimeters throughout; angles are radians internally and
//! degrees wherever they are reported.

mod camera;
mod mesh;
pub mod mesh_io;
mod pose;
mod rotation;

pub use camera::{project, CameraIntrinsics};
pub use mesh::{Mesh, NocsBox};
pub use mesh_io::load_mesh;
pub use pose::{Pose, PoseJson};
pub use rotation::{geodesic_angle, Rotation};
