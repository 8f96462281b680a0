//! Multi-level dense feature extraction.
//!
//! [`FeatureExtractor`] is the plug-in point. [`LocalStatsExtractor`] is the
//! shipped implementation: at level `k` the image is box-downsampled
//! `2^(k−1)` times and every pixel gets, per color channel, the local mean and
//! standard deviation over each configured window plus central-difference
//! gradients.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OsopError, Result};
use crate::image::{ColorImage, Grid, Mask};

/// Smallest side length any level may have.
pub const MIN_LEVEL_SIDE: usize = 4;

/// `height × width × depth` feature tensor for one level (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level: usize,
    width: usize,
    height: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(level: usize, width: usize, height: usize, depth: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * depth, "feature map data length");
        Self {
            level,
            width,
            height,
            depth,
            data,
        }
    }

    pub fn zeros(level: usize, width: usize, height: usize, depth: usize) -> Self {
        Self::new(level, width, height, depth, vec![0.0; width * height * depth])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.depth;
        &self.data[i..i + self.depth]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = (v * self.width + u) * self.depth;
        &mut self.data[i..i + self.depth]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.depth)
    }
}

/// Extractor settings, embedded in the template database metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Identifies the extractor implementation.
    pub name: String,
    /// Number of levels N (≥ 2).
    pub levels: usize,
    /// Half-widths of the mean/std windows; one (mean, std) block per radius.
    pub window_radii: Vec<usize>,
    /// Per-level feature depth D^k.
    pub depths: Vec<usize>,
    /// Matching dimension D′ of the last level after projection.
    pub reduced_dim: usize,
    pub projection_seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        LocalStatsExtractor::config_for(3, vec![1], 8, 7)
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(OsopError::InvalidConfig("extractor needs at least 2 levels".into()));
        }
        if self.depths.len() != self.levels || self.depths.iter().any(|&d| d < 2) {
            return Err(OsopError::InvalidConfig("one depth ≥ 2 per level required".into()));
        }
        // The matching projection drops one brightness direction per 3 channels.
        let last = self.depths[self.levels - 1];
        let max = last - last / 3;
        if self.reduced_dim == 0 || self.reduced_dim > max {
            return Err(OsopError::InvalidConfig(format!(
                "reduced dimension {} must be in 1..={max}",
                self.reduced_dim
            )));
        }
        Ok(())
    }

    pub fn last_level(&self) -> usize {
        self.levels
    }

    pub fn depth(&self, level: usize) -> usize {
        self.depths[level - 1]
    }
}

/// Dense multi-level feature extractor.
pub trait FeatureExtractor: Send + Sync {
    fn config(&self) -> &ExtractorConfig;

    /// Returns levels `1..=N`; level `k` has size `floor(W / 2^(k−1))`.
    fn extract(&self, image: &ColorImage) -> Result<Vec<FeatureMap>>;
}

/// Side lengths of every level, or `ImageTooSmall`.
pub fn level_sizes(width: usize, height: usize, levels: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(levels);
    let (mut w, mut h) = (width, height);
    for _ in 0..levels {
        if w < MIN_LEVEL_SIDE || h < MIN_LEVEL_SIDE {
            return Err(OsopError::ImageTooSmall {
                width,
                height,
                levels,
            });
        }
        out.push((w, h));
        w /= 2;
        h /= 2;
    }
    Ok(out)
}

/// 2×2 box average, floor dimensions.
pub fn downsample2(img: &ColorImage) -> ColorImage {
    let (w, h) = (img.width() / 2, img.height() / 2);
    Grid::from_fn(w, h, |u, v| {
        let mut c = [0.0; 3];
        for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = img.get(2 * u + du, 2 * v + dv);
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|x| x * 0.25)
    })
}

/// Deterministic local-statistics extractor.
#[derive(Debug, Clone)]
pub struct LocalStatsExtractor {
    config: ExtractorConfig,
}

pub const LOCAL_STATS_NAME: &str = "local-stats";

impl LocalStatsExtractor {
    pub fn new(levels: usize, window_radii: Vec<usize>, reduced_dim: usize, projection_seed: u64) -> Result<Self> {
        if window_radii.is_empty() {
            return Err(OsopError::InvalidConfig("at least one window radius".into()));
        }
        let config = Self::config_for(levels, window_radii, reduced_dim, projection_seed);
        config.validate()?;
        Ok(Self { config })
    }

    pub fn from_config(config: &ExtractorConfig) -> Result<Self> {
        if config.name != LOCAL_STATS_NAME {
            return Err(OsopError::ConfigMismatch(format!(
                "extractor '{}' is not built in",
                config.name
            )));
        }
        let ext = Self::new(config.levels, config.window_radii.clone(), config.reduced_dim, config.projection_seed)?;
        if &ext.config != config {
            return Err(OsopError::ConfigMismatch("inconsistent extractor depths".into()));
        }
        Ok(ext)
    }

    fn config_for(levels: usize, window_radii: Vec<usize>, reduced_dim: usize, projection_seed: u64) -> ExtractorConfig {
        let depth = 3 * (2 * window_radii.len() + 2);
        ExtractorConfig {
            name: LOCAL_STATS_NAME.into(),
            levels,
            depths: vec![depth; levels],
            window_radii,
            reduced_dim,
            projection_seed,
        }
    }

    fn level_features(&self, level: usize, img: &ColorImage) -> FeatureMap {
        let (w, h) = img.dims();
        let radii = &self.config.window_radii;
        let depth = self.config.depth(level);
        let mut fm = FeatureMap::zeros(level, w, h, depth);
        let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
        let mut window: Vec<f64> = Vec::new();
        for v in 0..h {
            for u in 0..w {
                let px = fm.pixel_mut(u, v);
                let mut o = 0;
                for &r in radii {
                    let r = r as isize;
                    for c in 0..3 {
                        window.clear();
                        for dv in -r..=r {
                            for du in -r..=r {
                                let s = img.get(clamp(u as isize + du, w), clamp(v as isize + dv, h));
                                window.push(s[c]);
                            }
                        }
                        let n = window.len() as f64;
                        let mean = window.iter().sum::<f64>() / n;
                        let var = window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        px[o + c] = mean;
                        px[o + 3 + c] = var.sqrt();
                    }
                    o += 6;
                }
                let (ul, ur) = (clamp(u as isize - 1, w), clamp(u as isize + 1, w));
                let (vu, vd) = (clamp(v as isize - 1, h), clamp(v as isize + 1, h));
                for c in 0..3 {
                    px[o + c] = (img.get(ur, v)[c] - img.get(ul, v)[c]) / 2.0;
                    px[o + 3 + c] = (img.get(u, vd)[c] - img.get(u, vu)[c]) / 2.0;
                }
            }
        }
        fm
    }
}

impl Default for LocalStatsExtractor {
    fn default() -> Self {
        Self {
            config: ExtractorConfig::default(),
        }
    }
}

impl FeatureExtractor for LocalStatsExtractor {
    fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    fn extract(&self, image: &ColorImage) -> Result<Vec<FeatureMap>> {
        level_sizes(image.width(), image.height(), self.config.levels)?;
        let mut out = Vec::with_capacity(self.config.levels);
        let mut img = image.clone();
        for level in 1..=self.config.levels {
            if level > 1 {
                img = downsample2(&img);
            }
            out.push(self.level_features(level, &img));
        }
        Ok(out)
    }
}

/// Per-channel mean of the feature vectors under `mask` (same resolution).
pub fn average_descriptor(f: &FeatureMap, mask: &Mask) -> Result<Vec<f64>> {
    if mask.dims() != (f.width(), f.height()) {
        return Err(OsopError::ResolutionMismatch(format!(
            "mask {:?} vs features {}x{}",
            mask.dims(),
            f.width(),
            f.height()
        )));
    }
    let mut sum = vec![0.0; f.depth()];
    let mut n = 0usize;
    for (px, &m) in f.pixels().zip(mask.data()) {
        if m {
            n += 1;
            for (s, x) in sum.iter_mut().zip(px) {
                *s += x;
            }
        }
    }
    if n == 0 {
        return Err(OsopError::EmptyMask);
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Downsamples a full-resolution mask to `level` by max pooling.
pub fn mask_at_level(mask: &Mask, level: usize, width: usize, height: usize) -> Mask {
    if level == 1 && mask.dims() == (width, height) {
        return mask.clone();
    }
    mask.max_pool(1 << (level - 1), width, height)
}

/// Fixed random projection onto `output` orthonormal directions, standing in
/// for the learned 1×1 reduction of the matching stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    input: usize,
    output: usize,
    /// Row-major `output × input`.
    rows: Vec<f64>,
}

impl Reduction {
    pub fn new(input: usize, output: usize, seed: u64) -> Result<Self> {
        if output == 0 || output > input {
            return Err(OsopError::InvalidConfig(format!("cannot reduce {input} to {output} dims")));
        }
        Self::excluding(input, output, seed, &[])
    }

    /// Like [`Reduction::new`], with every output direction orthogonal to `excluded`.
    pub fn excluding(input: usize, output: usize, seed: u64, excluded: &[Vec<f64>]) -> Result<Self> {
        if output == 0 || output + excluded.len() > input {
            return Err(OsopError::InvalidConfig(format!("cannot reduce {input} to {output} dims")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = DMatrix::<f64>::from_fn(input, output, |_, _| StandardNormal.sample(&mut rng));
        if !excluded.is_empty() {
            let e = DMatrix::<f64>::from_fn(input, excluded.len(), |i, j| excluded[j][i]);
            let eq = e.qr().q();
            g -= &eq * (eq.transpose() * &g);
        }
        let q = g.qr().q();
        let mut rows = Vec::with_capacity(input * output);
        for j in 0..output {
            for i in 0..input {
                rows.push(q[(i, j)]);
            }
        }
        Ok(Self { input, output, rows })
    }

    pub fn for_config(cfg: &ExtractorConfig) -> Result<Self> {
        let d = cfg.depth(cfg.last_level());
        // The per-block brightness (equal weight on the three color channels
        // of one statistic) is shared by most pixels and would dominate every
        // correlation; the projection keeps only the directions orthogonal to it.
        let blocks: Vec<Vec<f64>> = (0..d / 3)
            .map(|b| (0..d).map(|i| if i / 3 == b { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::excluding(d, cfg.reduced_dim, cfg.projection_seed, &blocks)
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn apply(&self, f: &FeatureMap) -> Result<FeatureMap> {
        if f.depth() != self.input {
            return Err(OsopError::DepthMismatch {
                expected: self.input,
                found: f.depth(),
            });
        }
        let mut data = Vec::with_capacity(f.width() * f.height() * self.output);
        for px in f.pixels() {
            for row in self.rows.chunks_exact(self.input) {
                data.push(row.iter().zip(px).map(|(a, b)| a * b).sum());
            }
        }
        Ok(FeatureMap::new(f.level, f.width(), f.height(), self.output, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::pearson;
    use crate::geometry::{CameraIntrinsics, Pose, Rotation};
    use crate::render::render;
    use crate::scene::shapes;
    use nalgebra::Vector3;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn constant_image_features() {
        let img = Grid::filled(16, 16, [0.3, 0.6, 0.9]);
        let maps = LocalStatsExtractor::default().extract(&img).unwrap();
        assert_eq!(maps.len(), 3);
        for m in &maps {
            for px in m.pixels() {
                for c in 0..3 {
                    assert!((px[c] - [0.3, 0.6, 0.9][c]).abs() < 1e-12);
                    assert!(px[3 + c].abs() < 1e-12);
                    assert_eq!(px[6 + c], 0.0);
                    assert_eq!(px[9 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn level_shapes_halve() {
        let maps = LocalStatsExtractor::default().extract(&random_image(37, 21, 1)).unwrap();
        let dims: Vec<_> = maps.iter().map(|m| (m.width(), m.height(), m.depth())).collect();
        assert_eq!(dims, vec![(37, 21, 12), (18, 10, 12), (9, 5, 12)]);
        assert!(maps.iter().all(|m| m.data().iter().all(|x| x.is_finite())));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let err = LocalStatsExtractor::default().extract(&random_image(15, 40, 1));
        assert!(matches!(err, Err(OsopError::ImageTooSmall { .. })));
    }

    #[test]
    fn level_one_is_translation_equivariant() {
        let img = random_image(24, 20, 4);
        let shift = 3;
        let shifted = Grid::from_fn(24, 20, |u, v| *img.get((u + 24 - shift) % 24, v));
        let ex = LocalStatsExtractor::default();
        let a = &ex.extract(&img).unwrap()[0];
        let b = &ex.extract(&shifted).unwrap()[0];
        // Interior pixels whose windows avoid both the border and the wrap seam.
        for v in 1..19 {
            for u in 1..(24 - shift - 1) {
                assert_eq!(a.pixel(u, v), b.pixel(u + shift, v));
            }
        }
    }

    #[test]
    fn nearby_views_correlate_more_than_distant_ones() {
        let mesh = shapes::colored_cube(60.0);
        let k = CameraIntrinsics::new(200.0, 200.0, 32.0, 32.0, 64, 64).unwrap();
        let ex = LocalStatsExtractor::default();
        let descriptor = |r: Rotation| {
            let out = render(&mesh, &Pose::new(r, Vector3::new(0.0, 0.0, 300.0)), &k).unwrap();
            let maps = ex.extract(&out.color).unwrap();
            let last = &maps[2];
            let m = mask_at_level(&out.mask, 3, last.width(), last.height());
            average_descriptor(last, &m).unwrap()
        };
        let base = Rotation::rot_x(0.5) * Rotation::rot_y(0.4);
        let d0 = descriptor(base);
        let d5 = descriptor(Rotation::rot_y(5f64.to_radians()) * base);
        let d90 = descriptor(Rotation::rot_y(90f64.to_radians()) * base);
        let near = pearson(&d0, &d5).unwrap();
        let far = pearson(&d0, &d90).unwrap();
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn average_descriptor_examples() {
        let maps = LocalStatsExtractor::default().extract(&random_image(16, 16, 2)).unwrap();
        let f = &maps[0];
        let mut single = Mask::filled(16, 16, false);
        single.set(5, 7, true);
        assert_eq!(average_descriptor(f, &single).unwrap(), f.pixel(5, 7));

        let constant = FeatureMap::new(1, 4, 4, 2, [1.5, -2.0].repeat(16));
        let all = Mask::filled(4, 4, true);
        assert_eq!(average_descriptor(&constant, &all).unwrap(), vec![1.5, -2.0]);

        assert!(matches!(
            average_descriptor(f, &Mask::filled(16, 16, false)),
            Err(OsopError::EmptyMask)
        ));
    }

    #[test]
    fn average_descriptor_matches_naive_mean() {
        let maps = LocalStatsExtractor::default().extract(&random_image(20, 16, 8)).unwrap();
        let f = &maps[0];
        let mask = Grid::from_fn(20, 16, |u, v| (u * 7 + v * 3) % 5 != 0);
        let got = average_descriptor(f, &mask).unwrap();
        for d in 0..f.depth() {
            let (mut s, mut n) = (0.0, 0.0);
            for v in 0..16 {
                for u in 0..20 {
                    if *mask.get(u, v) {
                        s += f.pixel(u, v)[d];
                        n += 1.0;
                    }
                }
            }
            assert!((got[d] - s / n).abs() < 1e-12);
        }
    }

    #[test]
    fn reduction_is_orthonormal_and_seeded() {
        let r = Reduction::new(12, 8, 7).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..12).map(|i| r.rows[a * 12 + i] * r.rows[b * 12 + i]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        assert_eq!(r, Reduction::new(12, 8, 7).unwrap());
        assert_ne!(r, Reduction::new(12, 8, 8).unwrap());
        assert!(Reduction::new(4, 5, 0).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = random_image(32, 32, 6);
        let ex = LocalStatsExtractor::default();
        assert_eq!(ex.extract(&img).unwrap(), ex.extract(&img).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(LocalStatsExtractor::new(1, vec![1], 4, 0).is_err());
        assert!(LocalStatsExtractor::new(3, vec![], 4, 0).is_err());
        assert!(LocalStatsExtractor::new(3, vec![1, 2], 12, 0).is_ok());
        assert!(LocalStatsExtractor::new(3, vec![1, 2], 13, 0).is_err());
        let mut cfg = ExtractorConfig::default();
        cfg.name = "other".into();
        assert!(LocalStatsExtractor::from_config(&cfg).is_err());
    }
}
