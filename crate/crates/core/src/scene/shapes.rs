//! Built-in polyhedral meshes for tests, demos and the synthetic benchmark.
//!
//! Textured variants subdivide every face into a barycentric grid and color
//! each vertex with a smooth, seeded function of its position. Color at a
//! surface point is therefore independent of the viewpoint, which is what
//! the correlation-based stages rely on.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OsopError, Result};
use crate::geometry::Mesh;

type Tri = [Vector3<f64>; 3];

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: &[&str] = &["cube", "box", "prism", "wedge", "lblock", "octa", "colored-cube", "slab"];

/// Resolves `name` (optionally `name:seed`) to a built-in mesh of roughly
/// 100 mm diameter.
pub fn builtin(name: &str) -> Result<Mesh> {
    let (base, seed) = match name.split_once(':') {
        Some((b, s)) => (
            b,
            s.parse::<u64>()
                .map_err(|_| OsopError::InvalidConfig(format!("bad mesh seed in {name}")))?,
        ),
        None => (name, 0),
    };
    match base {
        "cube" => Ok(textured_box([60.0, 60.0, 60.0], 8, seed)),
        "box" => Ok(textured_box([80.0, 50.0, 30.0], 8, seed + 1)),
        "prism" => Ok(textured_prism(6, 35.0, 70.0, 6, seed + 2)),
        "wedge" => Ok(textured_prism(3, 45.0, 50.0, 8, seed + 3)),
        "lblock" => Ok(textured_lblock(8, seed + 4)),
        "octa" => Ok(textured_octahedron(45.0, 10, seed + 5)),
        "colored-cube" => Ok(colored_cube(60.0)),
        "slab" => Ok(clutter_tone(textured_box([70.0, 50.0, 12.0], 8, seed + 6))),
        _ => Err(OsopError::InvalidConfig(format!(
            "unknown built-in mesh {base}; known: {BUILTIN_NAMES:?}"
        ))),
    }
}

/// Plain axis-aligned cube centered at the origin, 12 triangles, no colors.
pub fn cube(edge: f64) -> Mesh {
    let h = edge / 2.0;
    let v: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            Vector3::new(
                if i & 1 == 0 { -h } else { h },
                if i & 2 == 0 { -h } else { h },
                if i & 4 == 0 { -h } else { h },
            )
        })
        .collect();
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let mut t = Vec::new();
    for q in quads {
        t.push([q[0], q[1], q[2]]);
        t.push([q[0], q[2], q[3]]);
    }
    Mesh::new(v, t, None).expect("cube is valid")
}

/// Cube whose six faces carry distinct flat colors.
pub fn colored_cube(edge: f64) -> Mesh {
    const FACE_COLORS: [[f64; 3]; 6] = [
        [0.9, 0.1, 0.1],
        [0.1, 0.8, 0.1],
        [0.1, 0.2, 0.9],
        [0.9, 0.9, 0.1],
        [0.8, 0.1, 0.8],
        [0.1, 0.8, 0.8],
    ];
    let faces = box_faces([edge, edge, edge]);
    let mut verts = Vec::new();
    let mut colors = Vec::new();
    let mut tris = Vec::new();
    for (f, quad) in faces.iter().enumerate() {
        let base = verts.len() as u32;
        for p in quad {
            verts.push(*p);
            colors.push(FACE_COLORS[f]);
        }
        tris.push([base, base + 1, base + 2]);
        tris.push([base, base + 2, base + 3]);
    }
    Mesh::new(verts, tris, Some(colors)).expect("colored cube is valid")
}

fn box_faces(dims: [f64; 3]) -> Vec<[Vector3<f64>; 4]> {
    let [hx, hy, hz] = dims.map(|d| d / 2.0);
    let p = |x: f64, y: f64, z: f64| Vector3::new(x * hx, y * hy, z * hz);
    vec![
        [p(-1., -1., -1.), p(-1., 1., -1.), p(1., 1., -1.), p(1., -1., -1.)],
        [p(-1., -1., 1.), p(1., -1., 1.), p(1., 1., 1.), p(-1., 1., 1.)],
        [p(-1., -1., -1.), p(1., -1., -1.), p(1., -1., 1.), p(-1., -1., 1.)],
        [p(-1., 1., -1.), p(-1., 1., 1.), p(1., 1., 1.), p(1., 1., -1.)],
        [p(-1., -1., -1.), p(-1., -1., 1.), p(-1., 1., 1.), p(-1., 1., -1.)],
        [p(1., -1., -1.), p(1., 1., -1.), p(1., 1., 1.), p(1., -1., 1.)],
    ]
}

fn quads_to_tris(quads: &[[Vector3<f64>; 4]]) -> Vec<Tri> {
    quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect()
}

/// Box with a smooth seeded texture; every face split into `n × n` cells.
pub fn textured_box(dims: [f64; 3], n: usize, seed: u64) -> Mesh {
    texture(quads_to_tris(&box_faces(dims)), n, seed)
}

/// Right prism over a regular `sides`-gon of circumradius `radius`.
pub fn textured_prism(sides: usize, radius: f64, height: f64, n: usize, seed: u64) -> Mesh {
    let h = height / 2.0;
    let ring: Vec<(f64, f64)> = (0..sides)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / sides as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect();
    let mut tris = Vec::new();
    let (top, bot) = (Vector3::new(0.0, 0.0, h), Vector3::new(0.0, 0.0, -h));
    for i in 0..sides {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % sides];
        let q = [
            Vector3::new(x0, y0, -h),
            Vector3::new(x1, y1, -h),
            Vector3::new(x1, y1, h),
            Vector3::new(x0, y0, h),
        ];
        tris.extend(quads_to_tris(&[q]));
        tris.push([top, Vector3::new(x0, y0, h), Vector3::new(x1, y1, h)]);
        tris.push([bot, Vector3::new(x1, y1, -h), Vector3::new(x0, y0, -h)]);
    }
    texture(tris, n, seed)
}

/// Non-convex L-shaped block made of two boxes.
pub fn textured_lblock(n: usize, seed: u64) -> Mesh {
    let shift = |q: [Vector3<f64>; 4], d: Vector3<f64>| q.map(|p| p + d);
    let mut quads: Vec<[Vector3<f64>; 4]> = box_faces([70.0, 25.0, 30.0])
        .into_iter()
        .map(|q| shift(q, Vector3::new(0.0, -12.5, 0.0)))
        .collect();
    quads.extend(
        box_faces([25.0, 40.0, 30.0])
            .into_iter()
            .map(|q| shift(q, Vector3::new(-22.5, 20.0, 0.0))),
    );
    texture(quads_to_tris(&quads), n, seed)
}

pub fn textured_octahedron(radius: f64, n: usize, seed: u64) -> Mesh {
    let axes = [
        Vector3::new(radius, 0.0, 0.0),
        Vector3::new(0.0, radius * 0.8, 0.0),
        Vector3::new(0.0, 0.0, radius * 0.6),
    ];
    let mut tris = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let (a, b, c) = (axes[0] * sx, axes[1] * sy, axes[2] * sz);
                if sx * sy * sz > 0.0 {
                    tris.push([a, b, c]);
                } else {
                    tris.push([a, c, b]);
                }
            }
        }
    }
    texture(tris, n, seed)
}

fn subdivide_tri(t: &Tri, n: usize) -> Vec<Tri> {
    let at = |i: usize, j: usize| {
        let (s, u) = (i as f64 / n as f64, j as f64 / n as f64);
        t[0] * (1.0 - s - u) + t[1] * s + t[2] * u
    };
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..(n - j) {
            out.push([at(i, j), at(i + 1, j), at(i, j + 1)]);
            if i + j + 1 < n {
                out.push([at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)]);
            }
        }
    }
    out
}

/// Seeded smooth color field over the object.
#[derive(Debug, Clone)]
pub struct TextureField {
    center: Vector3<f64>,
    scale: f64,
    low: [Vector3<f64>; 3],
    high: [Vector3<f64>; 3],
    phase: [f64; 3],
}

impl TextureField {
    pub fn new(center: Vector3<f64>, half_extent: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vector3<f64> = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            v / v.norm().max(1e-6)
        };
        // Low-frequency directions start from the coordinate axes so that the
        // three channels stay independent.
        let low = [
            (Vector3::x() + unit() * 0.3).normalize(),
            (Vector3::y() + unit() * 0.3).normalize(),
            (Vector3::z() + unit() * 0.3).normalize(),
        ];
        let high = [unit(), unit(), unit()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let phase = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        Self {
            center,
            scale: 1.0 / half_extent,
            low,
            high,
            phase,
        }
    }

    pub fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let q = (p - self.center) * self.scale;
        let mut c = [0.0; 3];
        for k in 0..3 {
            let slow = (1.4 * self.low[k].dot(&q)).sin();
            let fast = (5.0 * self.high[k].dot(&q) + self.phase[k]).sin();
            c[k] = (0.5 + 0.33 * slow + 0.12 * fast).clamp(0.0, 1.0);
        }
        c
    }
}

const BASE_WEIGHT: f64 = 0.3;

/// Low-contrast, cool-toned version of a colored mesh, matching the scene
/// background; used for occluders that should hide the target without
/// looking like one.
pub fn clutter_tone(mesh: Mesh) -> Mesh {
    const TINT: [f64; 3] = [0.3, 0.35, 0.55];
    let Some(colors) = mesh.colors() else {
        return mesh;
    };
    let toned = colors
        .iter()
        .map(|c| {
            let l = (c[0] + c[1] + c[2]) / 3.0 - 0.5;
            TINT.map(|t| (t + 0.35 * l).clamp(0.0, 1.0))
        })
        .collect();
    mesh.with_colors(toned).expect("same vertex count")
}

/// Saturated red-to-yellow-green hue per seed; textures vary around it.
pub fn base_color(seed: u64) -> [f64; 3] {
    let hue = ((seed as f64 * 0.618_033_988_75).fract() * 0.35 + 0.95).fract();
    hsv_to_rgb(hue, 0.8, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn texture(tris: Vec<Tri>, n: usize, seed: u64) -> Mesh {
    let tris: Vec<Tri> = if n > 1 {
        tris.iter().flat_map(|t| subdivide_tri(t, n)).collect()
    } else {
        tris
    };
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for t in &tris {
        for p in t {
            min = min.inf(p);
            max = max.sup(p);
        }
    }
    let field = TextureField::new((min + max) / 2.0, (max - min).norm() / 2.0, seed);
    let tint = base_color(seed);
    let mut verts = Vec::with_capacity(tris.len() * 3);
    let mut colors = Vec::with_capacity(tris.len() * 3);
    let mut faces = Vec::with_capacity(tris.len());
    for t in &tris {
        let base = verts.len() as u32;
        for p in t {
            verts.push(*p);
            let c = field.color(p);
            colors.push([0, 1, 2].map(|k| BASE_WEIGHT * tint[k] + (1.0 - BASE_WEIGHT) * c[k]));
        }
        faces.push([base, base + 1, base + 2]);
    }
    Mesh::new(verts, faces, Some(colors)).expect("textured mesh is valid")
}
