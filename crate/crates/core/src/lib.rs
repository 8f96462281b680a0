//! One-shot 6-DoF object pose estimation from a textured 3D model.
//!
//! The pipeline has four stages:
//!
//! 1. **Localization** ([`attention`]): per-pixel Pearson correlation of image
//!    features against the 4D template descriptor, turned into conditioned
//!    attention maps and a segmentation mask.
//! 2. **Viewpoint matching** ([`matching`]): masked per-pixel correlation
//!    similarity between the detected crop and every template.
//! 3. **Dense correspondences** ([`correspondence`]): 2D-2D matches between the
//!    crop and a matched template, lifted to 2D-3D through the template NOCS map.
//! 4. **Pose solving** ([`solvers`]): PnP or Kabsch inside RANSAC, optional ICP,
//!    and multi-hypothesis verification ([`pipeline`]).
//!
//! Templates come from the built-in software rasterizer ([`render`]) and are
//! organized into a [`template_db::TemplateDatabase`]. Feature extraction is
//! pluggable through [`features::FeatureExtractor`]; the shipped extractor is a
//! deterministic local-statistics extractor that needs no training.
//!
//! [`scene`], [`metrics`] and [`benchmark`] provide the synthetic evaluation
//! harness (ADD, MSSD/MSPD, two-metric average recall).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod benchmark;
pub mod correspondence;
mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod solvers;
pub mod spatial;
pub mod template_db;

pub use error::{OsopError, Result};
pub use geometry::{CameraIntrinsics, Mesh, NocsBox, Pose, Rotation};
