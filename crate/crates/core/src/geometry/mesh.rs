use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{OsopError, Result};

/// Triangle mesh in millimeters with optional per-vertex RGB in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    diameter: f64,
}

/// Vertex counts above this use a hull-candidate prefilter for the diameter.
const EXACT_DIAMETER_LIMIT: usize = 8000;

impl Mesh {
    /// Validates indices, drops zero-area triangles and computes the diameter.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        colors: Option<Vec<[f64; 3]>>,
    ) -> Result<Self> {
        if vertices.is_empty() {
            return Err(OsopError::InvalidMesh("no vertices".into()));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(OsopError::InvalidMesh("non-finite vertex".into()));
        }
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(OsopError::InvalidMesh(format!(
                    "{} colors for {} vertices",
                    c.len(),
                    vertices.len()
                )));
            }
        }
        let n = vertices.len() as u32;
        let mut kept = Vec::with_capacity(triangles.len());
        for t in triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(OsopError::InvalidMesh(format!(
                    "triangle {t:?} indexes past {n} vertices"
                )));
            }
            let [a, b, c] = t.map(|i| vertices[i as usize]);
            if (b - a).cross(&(c - a)).norm() > 0.0 {
                kept.push(t);
            }
        }
        if kept.is_empty() {
            return Err(OsopError::InvalidMesh("no non-degenerate triangle".into()));
        }
        let diameter = compute_diameter(&vertices);
        if !(diameter > 0.0) {
            return Err(OsopError::InvalidMesh("zero diameter".into()));
        }
        Ok(Self {
            vertices,
            triangles: kept,
            colors,
            diameter,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    /// Maximum pairwise vertex distance, mm.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn nocs_box(&self) -> NocsBox {
        let mut min = self.vertices[0];
        let mut max = self.vertices[0];
        for v in &self.vertices {
            min = min.inf(v);
            max = max.sup(v);
        }
        NocsBox { min, max }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != self.vertices.len() {
            return Err(OsopError::InvalidMesh("color count mismatch".into()));
        }
        self.colors = Some(colors);
        Ok(self)
    }
}

fn compute_diameter(vertices: &[Vector3<f64>]) -> f64 {
    let candidates: Vec<Vector3<f64>> = if vertices.len() <= EXACT_DIAMETER_LIMIT {
        vertices.to_vec()
    } else {
        extreme_points(vertices)
    };
    let mut best = 0.0f64;
    for (i, a) in candidates.iter().enumerate() {
        for b in &candidates[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

// Vertices extremal along a dense set of directions; the diameter endpoints
// are hull vertices and are extremal along their own connecting direction.
fn extreme_points(vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n_dirs = 2000;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut keep = vec![false; vertices.len()];
    for k in 0..n_dirs {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n_dirs as f64;
        let r = (1.0 - z * z).sqrt();
        let d = Vector3::new(r * (golden * k as f64).cos(), r * (golden * k as f64).sin(), z);
        let (mut lo, mut hi) = (0usize, 0usize);
        let (mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, v) in vertices.iter().enumerate() {
            let s = v.dot(&d);
            if s < lo_v {
                lo_v = s;
                lo = i;
            }
            if s > hi_v {
                hi_v = s;
                hi = i;
            }
        }
        keep[lo] = true;
        keep[hi] = true;
    }
    vertices
        .iter()
        .zip(keep)
        .filter_map(|(v, k)| k.then_some(*v))
        .collect()
}

/// Axis-aligned box defining the NOCS map: per-axis affine map onto [0, 1]³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NocsBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

const BOX_TOL: f64 = 1e-9;

impl NocsBox {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(OsopError::InvalidMesh("degenerate NOCS box".into()));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn encode(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        if !self.contains(p, BOX_TOL) {
            return Err(OsopError::OutOfBox);
        }
        Ok(self.encode_clamped(p))
    }

    /// Encodes with the result clamped to [0, 1]³.
    pub fn encode_clamped(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let e = self.extent();
        Vector3::new(
            ((p.x - self.min.x) / e.x).clamp(0.0, 1.0),
            ((p.y - self.min.y) / e.y).clamp(0.0, 1.0),
            ((p.z - self.min.z) / e.z).clamp(0.0, 1.0),
        )
    }

    pub fn decode(&self, c: &Vector3<f64>) -> Vector3<f64> {
        self.min + self.extent().component_mul(c)
    }

    /// 3D error bound of decoding an 8-bit quantized NOCS triple.
    pub fn quantization_bound(&self) -> f64 {
        self.diagonal() * 3f64.sqrt() / 255.0
    }
}
