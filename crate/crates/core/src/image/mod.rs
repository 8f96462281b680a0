//! Dense 2D maps (color, depth, masks), square crop windows, resampling and PNG I/O.

mod png_io;

pub use png_io::{
    read_color_png, read_depth_png, read_mask_png, write_color_png, write_depth_png,
    write_mask_png, write_prob_png, DepthSidecar,
};

use serde::{Deserialize, Serialize};

/// Row-major `height × width` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ColorImage = Grid<[f64; 3]>;
pub type DepthMap = Grid<f64>;
pub type Mask = Grid<bool>;
pub type ScalarMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive pixel bounding box `(u0, v0, u1, v1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for v in 0..self.height {
            for u in 0..self.width {
                if *self.get(u, v) {
                    bb = Some(match bb {
                        None => (u, v, u, v),
                        Some((a, b, c, d)) => (a.min(u), b.min(v), c.max(u), d.max(v)),
                    });
                }
            }
        }
        bb
    }

    /// Downsamples by an integer factor; a cell is set if any source pixel is.
    pub fn max_pool(&self, factor: usize, width: usize, height: usize) -> Mask {
        Grid::from_fn(width, height, |u, v| {
            let mut any = false;
            for dv in 0..factor {
                for du in 0..factor {
                    let (su, sv) = (u * factor + du, v * factor + dv);
                    if su < self.width && sv < self.height && *self.get(su, sv) {
                        any = true;
                    }
                }
            }
            any
        })
    }

    /// Connected components (4-neighborhood) sorted by decreasing size.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let mut label = vec![false; self.data.len()];
        let mut comps = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || label[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![start];
            label[start] = true;
            while let Some(i) = stack.pop() {
                let (u, v) = (i % self.width, i / self.width);
                comp.push((u, v));
                let mut push = |j: usize| {
                    if self.data[j] && !label[j] {
                        label[j] = true;
                        stack.push(j);
                    }
                };
                if u > 0 {
                    push(i - 1);
                }
                if u + 1 < self.width {
                    push(i + 1);
                }
                if v > 0 {
                    push(i - self.width);
                }
                if v + 1 < self.height {
                    push(i + self.width);
                }
            }
            comp.sort_unstable_by_key(|&(u, v)| (v, u));
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].1.cmp(&b[0].1)).then(a[0].0.cmp(&b[0].0)));
        comps
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count();
        let union = self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a || **b)
            .count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl Grid<f64> {
    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ScalarMap {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Grid::from_fn(width, height, |u, v| {
            let x = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let y = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let lerp = |a: f64, b: f64, t: f64| if a == b { a } else { a + t * (b - a) };
            let top = lerp(*self.get(x0, y0), *self.get(x1, y0), fx);
            let bot = lerp(*self.get(x0, y1), *self.get(x1, y1), fx);
            lerp(top, bot, fy)
        })
    }
}

/// Square sampling window: output pixel `(i, j)` reads source coordinates
/// `(ox + step·i, oy + step·j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub ox: f64,
    pub oy: f64,
    pub step: f64,
    pub size: usize,
}

impl CropWindow {
    pub fn identity(size: usize) -> Self {
        Self {
            ox: 0.0,
            oy: 0.0,
            step: 1.0,
            size,
        }
    }

    /// Square window around an inclusive pixel bounding box, padded by
    /// `pad_fraction` of its longer side and resampled to `size` pixels.
    pub fn around_box(bbox: (usize, usize, usize, usize), pad_fraction: f64, size: usize) -> Self {
        let (u0, v0, u1, v1) = bbox;
        let cu = (u0 + u1) as f64 / 2.0;
        let cv = (v0 + v1) as f64 / 2.0;
        let side = ((u1 - u0 + 1).max(v1 - v0 + 1) as f64) * (1.0 + pad_fraction);
        let step = side / size as f64;
        // pixel i covers [ox + step·i − step/2, …]; window spans the padded box.
        Self {
            ox: cu - side / 2.0 + step / 2.0,
            oy: cv - side / 2.0 + step / 2.0,
            step,
            size,
        }
    }

    pub fn to_source(&self, i: f64, j: f64) -> (f64, f64) {
        (self.ox + self.step * i, self.oy + self.step * j)
    }

    pub fn to_crop(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.ox) / self.step, (v - self.oy) / self.step)
    }

    pub fn sample_nearest<T: Clone>(&self, src: &Grid<T>, background: T) -> Grid<T> {
        Grid::from_fn(self.size, self.size, |i, j| {
            let (x, y) = self.to_source(i as f64, j as f64);
            let (xr, yr) = (x.round(), y.round());
            if xr < 0.0 || yr < 0.0 || xr >= src.width() as f64 || yr >= src.height() as f64 {
                background.clone()
            } else {
                src.get(xr as usize, yr as usize).clone()
            }
        })
    }

    /// Bilinear color resampling; samples outside the source read as black.
    pub fn sample_color(&self, src: &ColorImage) -> ColorImage {
        let (w, h) = (src.width() as isize, src.height() as isize);
        let at = |x: isize, y: isize| -> [f64; 3] {
            if x < 0 || y < 0 || x >= w || y >= h {
                [0.0; 3]
            } else {
                *src.get(x as usize, y as usize)
            }
        };
        Grid::from_fn(self.size, self.size, |i, j| {
            let (x, y) = self.to_source(i as f64, j as f64);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
            let mut out = [0.0; 3];
            for k in 0..3 {
                out[k] = (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k]);
            }
            out
        })
    }
}

/// Rounds every channel to the nearest multiple of 1/255.
pub fn quantize_unit(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
