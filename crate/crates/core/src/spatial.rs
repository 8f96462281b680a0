//! Uniform-grid exact nearest-neighbour index over 3D points.

use nalgebra::Vector3;

/// Exact nearest-neighbour search over a fixed point set. Ties resolve to the
/// smallest point index.
#[derive(Debug, Clone)]
pub struct PointGrid {
    points: Vec<Vector3<f64>>,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

const MAX_CELLS: usize = 1 << 18;

impl PointGrid {
    /// Builds the index; `cell` ≤ 0 picks a size giving a few points per cell.
    pub fn new(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in &points {
            min = min.inf(p);
            max = max.sup(p);
        }
        if points.is_empty() {
            min = Vector3::zeros();
            max = Vector3::zeros();
        }
        let extent = (max - min).map(|e| e.max(1e-9));
        let mut cell = if cell > 0.0 {
            cell
        } else {
            let vol = extent.x * extent.y * extent.z;
            let target = (points.len() as f64 / 4.0).max(1.0);
            (vol / target).cbrt().max(extent.max() / 64.0)
        };
        let dims_for = |c: f64| extent.map(|e| (e / c).floor() as usize + 1);
        let mut d = dims_for(cell);
        while d.x * d.y * d.z > MAX_CELLS {
            cell *= 1.5;
            d = dims_for(cell);
        }
        let dims = [d.x, d.y, d.z];
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, p) in points.iter().enumerate() {
            let c = Self::cell_of(&min, cell, p);
            let idx = (c[2] as usize * dims[1] + c[1] as usize) * dims[0] + c[0] as usize;
            cells[idx].push(i as u32);
        }
        Self {
            points,
            origin: min,
            cell,
            dims,
            cells,
        }
    }

    fn cell_of(origin: &Vector3<f64>, cell: f64, p: &Vector3<f64>) -> [i64; 3] {
        let r = (p - origin) / cell;
        [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        self.nearest_within(q, f64::INFINITY)
    }

    /// Like [`nearest`](Self::nearest) but gives up on points farther than
    /// `max_dist`, which bounds the search.
    pub fn nearest_within(&self, q: &Vector3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = Self::cell_of(&self.origin, self.cell, q);
        let dims = self.dims.map(|d| d as i64);
        // Largest Chebyshev ring that still touches the grid.
        let mut max_ring = (0..3)
            .map(|k| c[k].abs().max((dims[k] - 1 - c[k]).abs()))
            .max()
            .unwrap();
        if max_dist.is_finite() {
            max_ring = max_ring.min((max_dist / self.cell).ceil() as i64 + 1);
        }
        let lo = |k: usize, r: i64| (c[k] - r).max(0);
        let hi = |k: usize, r: i64| (c[k] + r).min(dims[k] - 1);
        let mut best: Option<(f64, u32)> = None;
        for r in 0..=max_ring {
            for z in lo(2, r)..=hi(2, r) {
                for y in lo(1, r)..=hi(1, r) {
                    let interior = (z - c[2]).abs() < r && (y - c[1]).abs() < r;
                    let xs: &mut dyn Iterator<Item = i64> = if interior {
                        &mut [c[0] - r, c[0] + r].into_iter().filter(|&x| x >= 0 && x < dims[0])
                    } else {
                        &mut (lo(0, r)..=hi(0, r))
                    };
                    for x in xs {
                        let idx = ((z * dims[1] + y) * dims[0] + x) as usize;
                        for &i in &self.cells[idx] {
                            let d2 = (self.points[i as usize] - q).norm_squared();
                            let better = match best {
                                None => true,
                                Some((bd, bi)) => d2 < bd || (d2 == bd && i < bi),
                            };
                            if better {
                                best = Some((d2, i));
                            }
                        }
                    }
                }
            }
            if let Some((bd, _)) = best {
                let reach = r as f64 * self.cell;
                // Unvisited cells are at least `reach` away; equality keeps
                // scanning so index tie-breaks stay exact.
                if bd.sqrt() < reach {
                    break;
                }
            }
        }
        best.map(|(d2, i)| (i as usize, d2.sqrt())).filter(|&(_, d)| d <= max_dist)
    }
}
