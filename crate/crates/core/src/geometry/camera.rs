use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{OsopError, Result};

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(OsopError::InvalidIntrinsics("focal lengths must be > 0".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(OsopError::InvalidIntrinsics("cx outside image".into()));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(OsopError::InvalidIntrinsics("cy outside image".into()));
        }
        Ok(())
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > 0.0) {
            return Err(OsopError::NonPositiveDepth(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at pixel `(u, v)` with depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }

    /// Intrinsics of the virtual camera that sees the square window whose pixel
    /// `(i, j)` maps to image coordinates `(ox + step·i, oy + step·j)`.
    pub fn cropped(&self, ox: f64, oy: f64, step: f64, size: usize) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx / step,
            fy: self.fy / step,
            cx: (self.cx - ox) / step,
            cy: (self.cy - oy) / step,
            width: size,
            height: size,
        }
    }
}

/// Projects camera-frame points to pixels; fails if any point has z ≤ 0.
pub fn project(points: &[Vector3<f64>], k: &CameraIntrinsics) -> Result<Vec<Vector2<f64>>> {
    points.iter().map(|p| k.project_point(p)).collect()
}
