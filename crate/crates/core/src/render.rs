//! Z-buffered software rasterizer producing depth, mask, NOCS and color maps.
//!
//! Pixel centers sit at integer coordinates. Ownership of pixels that fall
//! exactly on an edge follows a top-left rule, so adjacent triangles never
//! both cover a pixel and the maps are label-exact.

use nalgebra::Vector3;

use crate::error::{OsopError, Result};
use crate::geometry::{CameraIntrinsics, Mesh, NocsBox, Pose};
use crate::image::{quantize_unit, ColorImage, DepthMap, Grid, Mask};

/// Triangles with any vertex closer than this (mm) are skipped.
const NEAR_PLANE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// mm, 0 for background.
    pub depth: DepthMap,
    pub mask: Mask,
    /// NOCS of the visible model point; exactly (0, 0, 0) on background.
    pub nocs: ColorImage,
    pub color: ColorImage,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    /// The maps as they survive PNG storage: NOCS and color on the 1/255
    /// lattice, depth on the `depth_scale` lattice.
    pub fn quantized(&self, depth_scale: f64) -> RenderOutput {
        let q3 = |c: &[f64; 3]| c.map(quantize_unit);
        RenderOutput {
            depth: self.depth.map(|&d| (d / depth_scale).round() * depth_scale),
            mask: self.mask.clone(),
            nocs: self.nocs.map(q3),
            color: self.color.map(q3),
        }
    }
}

/// One object in a multi-object render.
pub struct SceneObject<'a> {
    pub mesh: &'a Mesh,
    pub pose: Pose,
}

/// Multi-object render; `labels` holds the index of the visible object.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub output: RenderOutput,
    pub labels: Grid<Option<u16>>,
}

impl SceneRender {
    pub fn object_mask(&self, index: u16) -> Mask {
        self.labels.map(|l| *l == Some(index))
    }
}

struct Rasterizer {
    k: CameraIntrinsics,
    zbuf: Grid<f64>,
    label: Grid<Option<u16>>,
    model_point: Grid<Vector3<f64>>,
    color: Grid<[f64; 3]>,
}

impl Rasterizer {
    fn new(k: CameraIntrinsics) -> Self {
        let (w, h) = (k.width, k.height);
        Self {
            k,
            zbuf: Grid::filled(w, h, f64::INFINITY),
            label: Grid::filled(w, h, None),
            model_point: Grid::filled(w, h, Vector3::zeros()),
            color: Grid::filled(w, h, [0.0; 3]),
        }
    }

    fn draw(&mut self, mesh: &Mesh, pose: &Pose, label: u16) {
        let box_ = mesh.nocs_box();
        let cam: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| pose.apply(v)).collect();
        let colors = mesh.colors();
        for tri in mesh.triangles() {
            let idx = tri.map(|i| i as usize);
            let p = idx.map(|i| cam[i]);
            if p.iter().any(|q| q.z <= NEAR_PLANE) {
                continue;
            }
            let attr_color = idx.map(|i| match colors {
                Some(c) => Vector3::from(c[i]),
                None => box_.encode_clamped(&mesh.vertices()[i]),
            });
            let model = idx.map(|i| mesh.vertices()[i]);
            self.draw_triangle(p, model, attr_color, label);
        }
    }

    fn draw_triangle(
        &mut self,
        p: [Vector3<f64>; 3],
        model: [Vector3<f64>; 3],
        color: [Vector3<f64>; 3],
        label: u16,
    ) {
        let k = self.k;
        let s = p.map(|q| (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy));
        let (a, mut b, mut c) = (0usize, 1usize, 2usize);
        let edge = |s0: (f64, f64), s1: (f64, f64), x: f64, y: f64| {
            (s1.0 - s0.0) * (y - s0.1) - (s1.1 - s0.1) * (x - s0.0)
        };
        let mut area = edge(s[a], s[b], s[c].0, s[c].1);
        if area == 0.0 || !area.is_finite() {
            return;
        }
        if area < 0.0 {
            std::mem::swap(&mut b, &mut c);
            area = -area;
        }
        let (sa, sb, sc) = (s[a], s[b], s[c]);
        let min_x = sa.0.min(sb.0).min(sc.0).ceil().max(0.0);
        let max_x = sa.0.max(sb.0).max(sc.0).floor().min(k.width as f64 - 1.0);
        let min_y = sa.1.min(sb.1).min(sc.1).ceil().max(0.0);
        let max_y = sa.1.max(sb.1).max(sc.1).floor().min(k.height as f64 - 1.0);
        if min_x > max_x || min_y > max_y {
            return;
        }
        // Edge (s0 → s1) owns its boundary pixels iff it is a "top-left" edge.
        let owns = |s0: (f64, f64), s1: (f64, f64)| {
            let (dx, dy) = (s1.0 - s0.0, s1.1 - s0.1);
            dy > 0.0 || (dy == 0.0 && dx < 0.0)
        };
        let (own_bc, own_ca, own_ab) = (owns(sb, sc), owns(sc, sa), owns(sa, sb));
        let iz = [1.0 / p[a].z, 1.0 / p[b].z, 1.0 / p[c].z];
        let m = [model[a], model[b], model[c]];
        let col = [color[a], color[b], color[c]];
        for y in (min_y as usize)..=(max_y as usize) {
            for x in (min_x as usize)..=(max_x as usize) {
                let (fx, fy) = (x as f64, y as f64);
                let e_bc = edge(sb, sc, fx, fy);
                let e_ca = edge(sc, sa, fx, fy);
                let e_ab = edge(sa, sb, fx, fy);
                let inside = |e: f64, own: bool| e > 0.0 || (e == 0.0 && own);
                if !(inside(e_bc, own_bc) && inside(e_ca, own_ca) && inside(e_ab, own_ab)) {
                    continue;
                }
                let w = [e_bc / area, e_ca / area, e_ab / area];
                let pw = [w[0] * iz[0], w[1] * iz[1], w[2] * iz[2]];
                let inv_z = pw[0] + pw[1] + pw[2];
                let z = 1.0 / inv_z;
                if z < *self.zbuf.get(x, y) {
                    self.zbuf.set(x, y, z);
                    self.label.set(x, y, Some(label));
                    let mp = (m[0] * pw[0] + m[1] * pw[1] + m[2] * pw[2]) / inv_z;
                    self.model_point.set(x, y, mp);
                    let cp = (col[0] * pw[0] + col[1] * pw[1] + col[2] * pw[2]) / inv_z;
                    self.color
                        .set(x, y, [cp.x.clamp(0.0, 1.0), cp.y.clamp(0.0, 1.0), cp.z.clamp(0.0, 1.0)]);
                }
            }
        }
    }

    fn finish(self, boxes: &[NocsBox]) -> Result<SceneRender> {
        let (w, h) = (self.k.width, self.k.height);
        if self.label.data().iter().all(|l| l.is_none()) {
            return Err(OsopError::EmptyRender);
        }
        let depth = Grid::from_fn(w, h, |u, v| {
            if self.label.get(u, v).is_some() {
                *self.zbuf.get(u, v)
            } else {
                0.0
            }
        });
        let mask = self.label.map(|l| l.is_some());
        let nocs = Grid::from_fn(w, h, |u, v| match self.label.get(u, v) {
            Some(l) => {
                let n = boxes[*l as usize].encode_clamped(self.model_point.get(u, v));
                [n.x, n.y, n.z]
            }
            None => [0.0; 3],
        });
        Ok(SceneRender {
            output: RenderOutput {
                depth,
                mask,
                nocs,
                color: self.color,
            },
            labels: self.label,
        })
    }
}

/// Renders one mesh at `pose` (model → camera).
pub fn render(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics) -> Result<RenderOutput> {
    let mut r = Rasterizer::new(*k);
    r.draw(mesh, pose, 0);
    Ok(r.finish(&[mesh.nocs_box()])?.output)
}

/// Renders several meshes into one z-buffer; NOCS uses each mesh's own box.
pub fn render_scene(objects: &[SceneObject<'_>], k: &CameraIntrinsics) -> Result<SceneRender> {
    let mut r = Rasterizer::new(*k);
    for (i, o) in objects.iter().enumerate() {
        r.draw(o.mesh, &o.pose, i as u16);
    }
    let boxes: Vec<NocsBox> = objects.iter().map(|o| o.mesh.nocs_box()).collect();
    r.finish(&boxes)
}

/// A foreground pixel lifted to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectedPoint {
    pub u: usize,
    pub v: usize,
    pub point: Vector3<f64>,
}

/// Lifts every pixel with positive depth to a camera-frame point.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> Vec<BackprojectedPoint> {
    let mut out = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let z = *depth.get(u, v);
            if z > 0.0 {
                out.push(BackprojectedPoint {
                    u,
                    v,
                    point: k.unproject(u as f64, v as f64, z),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::scene::shapes;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn cube_face_depth_and_square_mask() {
        // 100 mm cube, front face at z = 1000 − 50.
        let cube = shapes::cube(100.0);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1000.0));
        let out = render(&cube, &pose, &k()).unwrap();
        assert!((out.depth.get(64, 64) - 950.0).abs() < 1e-9);
        // Front face spans ±50 mm at 950 mm → ±26.3 px; the back face is hidden.
        let (u0, v0, u1, v1) = out.mask.bounding_box().unwrap();
        assert_eq!((u0, v0, u1, v1), (38, 38, 90, 90));
        assert!(out.mask.get(64, 64) & !out.mask.get(37, 64));
    }

    #[test]
    fn translation_shifts_mask_centroid() {
        let cube = shapes::cube(100.0);
        let centroid = |m: &Mask| {
            let mut s = (0.0, 0.0, 0.0);
            for v in 0..m.height() {
                for u in 0..m.width() {
                    if *m.get(u, v) {
                        s = (s.0 + u as f64, s.1 + v as f64, s.2 + 1.0);
                    }
                }
            }
            (s.0 / s.2, s.1 / s.2)
        };
        let a = render(&cube, &Pose::from_translation(Vector3::new(0.0, 0.0, 1000.0)), &k()).unwrap();
        // 10% of the image extent at the front face depth: 12.8 px.
        let dx = 12.8 * 950.0 / 500.0;
        let b = render(&cube, &Pose::from_translation(Vector3::new(dx, 0.0, 1000.0)), &k()).unwrap();
        let (ca, cb) = (centroid(&a.mask), centroid(&b.mask));
        assert!((cb.0 - ca.0 - 12.8).abs() < 0.6, "shift {}", cb.0 - ca.0);
        assert!((cb.1 - ca.1).abs() < 1e-9);
    }

    #[test]
    fn camera_looking_away_is_empty() {
        let cube = shapes::cube(100.0);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -1000.0));
        assert!(matches!(render(&cube, &pose, &k()), Err(OsopError::EmptyRender)));
    }

    #[test]
    fn render_invariants_hold() {
        let mesh = shapes::textured_box([80.0, 50.0, 30.0], 4, 7);
        let pose = Pose::new(
            Rotation::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.9),
            Vector3::new(5.0, -8.0, 400.0),
        );
        let out = render(&mesh, &pose, &k()).unwrap();
        let zs: Vec<f64> = mesh.vertices().iter().map(|v| pose.apply(v).z).collect();
        let zmin = zs.iter().copied().fold(f64::INFINITY, f64::min) - 1e-6;
        let zmax = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-6;
        for i in 0..out.mask.len() {
            let fg = out.mask.data()[i];
            let d = out.depth.data()[i];
            let n = out.nocs.data()[i];
            assert_eq!(fg, d > 0.0);
            if fg {
                assert!(d >= zmin && d <= zmax);
                assert!(n.iter().all(|c| (0.0..=1.0).contains(c)));
            } else {
                assert_eq!(n, [0.0; 3]);
            }
        }
    }

    #[test]
    fn backprojection_is_consistent_with_render() {
        let mesh = shapes::textured_box([80.0, 50.0, 30.0], 4, 7);
        let pose = Pose::new(Rotation::rot_y(0.6) * Rotation::rot_x(0.3), Vector3::new(0.0, 10.0, 350.0));
        let out = render(&mesh, &pose, &k()).unwrap();
        let pts = backproject(&out.depth, &k());
        assert_eq!(pts.len(), out.mask.count());
        let b = mesh.nocs_box();
        let inv = pose.inverse();
        for bp in &pts {
            let uv = k().project_point(&bp.point).unwrap();
            assert!((uv.x - bp.u as f64).abs() <= 0.5 && (uv.y - bp.v as f64).abs() <= 0.5);
            let m = inv.apply(&bp.point);
            assert!(b.contains(&m, 1.0));
            let enc = b.encode_clamped(&m);
            let n = out.nocs.get(bp.u, bp.v);
            for c in 0..3 {
                assert!((enc[c] - n[c]).abs() <= 2.0 / 255.0);
            }
        }
    }

    #[test]
    fn backproject_examples() {
        let mut d = Grid::filled(128, 128, 0.0);
        assert!(backproject(&d, &k()).is_empty());
        d.set(64, 64, 1000.0);
        let p = backproject(&d, &k());
        assert_eq!(p[0].point, Vector3::new(0.0, 0.0, 1000.0));
    }

    #[test]
    fn nearer_of_interpenetrating_triangles_wins() {
        // Two triangles crossing along x = 0: A is nearer on the left, B on the right.
        let v = vec![
            Vector3::new(-40.0, -40.0, 900.0),
            Vector3::new(40.0, -40.0, 1100.0),
            Vector3::new(0.0, 40.0, 1000.0),
            Vector3::new(-40.0, -40.0, 1100.0),
            Vector3::new(40.0, -40.0, 900.0),
            Vector3::new(0.0, 40.0, 1000.0),
        ];
        let both = Mesh::new(v.clone(), vec![[0, 1, 2], [3, 4, 5]], None).unwrap();
        let only_a = Mesh::new(v.clone(), vec![[0, 1, 2]], None).unwrap();
        let only_b = Mesh::new(v, vec![[3, 4, 5]], None).unwrap();
        let id = Pose::identity();
        let (ra, rb, rab) = (
            render(&only_a, &id, &k()).unwrap(),
            render(&only_b, &id, &k()).unwrap(),
            render(&both, &id, &k()).unwrap(),
        );
        let mut contested = 0;
        for i in 0..rab.mask.len() {
            let (da, db, d) = (ra.depth.data()[i], rb.depth.data()[i], rab.depth.data()[i]);
            if da > 0.0 && db > 0.0 {
                contested += 1;
                assert_eq!(d, da.min(db));
            }
        }
        assert!(contested > 100);
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // A quad split along its diagonal must cover exactly the pixels of
        // the quad: no gaps, no double ownership (checked by label stability).
        let v = vec![
            Vector3::new(-20.0, -20.0, 500.0),
            Vector3::new(20.0, -20.0, 500.0),
            Vector3::new(20.0, 20.0, 500.0),
            Vector3::new(-20.0, 20.0, 500.0),
        ];
        let mesh = Mesh::new(v, vec![[0, 1, 2], [0, 2, 3]], None).unwrap();
        let out = render(&mesh, &Pose::identity(), &k()).unwrap();
        // ±20 mm at 500 mm → ±20 px: pixels 44..=84 with top-left ownership
        // of the exact boundary → 40 × 40.
        assert_eq!(out.mask.count(), 40 * 40);
    }
}
