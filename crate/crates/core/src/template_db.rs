//! Viewpoint sampling, template rendering and the 4D descriptor tensor.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{centered_unit, DescriptorTensor};
use crate::error::{OsopError, Result};
use crate::features::{average_descriptor, mask_at_level, ExtractorConfig, FeatureExtractor, FeatureMap, Reduction};
use crate::geometry::{geodesic_angle, mesh_io, CameraIntrinsics, Mesh, NocsBox, Pose, Rotation};
use crate::image::{read_color_png, read_depth_png, read_mask_png, write_color_png, write_depth_png, write_mask_png};
use crate::image::{CropWindow, Mask};
use crate::render::{render, RenderOutput};

pub const FORMAT_VERSION: u32 = 1;

/// Regular azimuth × elevation × in-plane lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointGrid {
    pub azimuth: usize,
    pub elevation: usize,
    pub inplane: usize,
    /// Camera-to-object distance, mm.
    pub radius: f64,
}

impl ViewpointGrid {
    pub fn new(azimuth: usize, elevation: usize, inplane: usize, radius: f64) -> Result<Self> {
        let g = Self {
            azimuth,
            elevation,
            inplane,
            radius,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuth == 0 || self.elevation == 0 || self.inplane == 0 {
            return Err(OsopError::InvalidConfig("grid dimensions must be ≥ 1".into()));
        }
        if !(self.radius > 0.0) {
            return Err(OsopError::InvalidConfig("grid radius must be > 0".into()));
        }
        Ok(())
    }

    /// Parses `AxExI`, e.g. `16x8x4`.
    pub fn parse_dims(s: &str) -> Result<[usize; 3]> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let dims: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| OsopError::InvalidConfig(format!("bad grid '{s}', expected AxExI")))?;
        match dims[..] {
            [a, e, i] if a > 0 && e > 0 && i > 0 => Ok([a, e, i]),
            _ => Err(OsopError::InvalidConfig(format!("bad grid '{s}', expected AxExI"))),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.azimuth, self.elevation, self.inplane]
    }

    pub fn count(&self) -> usize {
        self.azimuth * self.elevation * self.inplane
    }

    /// Grid indices in row-major order, azimuth slowest.
    pub fn indices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.azimuth).flat_map(move |x| (0..self.elevation).flat_map(move |y| (0..self.inplane).map(move |z| [x, y, z])))
    }

    /// (azimuth, elevation, roll) in degrees.
    pub fn angles(&self, idx: [usize; 3]) -> (f64, f64, f64) {
        (
            360.0 * idx[0] as f64 / self.azimuth as f64,
            -90.0 + 180.0 * (idx[1] as f64 + 0.5) / self.elevation as f64,
            360.0 * idx[2] as f64 / self.inplane as f64,
        )
    }

    pub fn rotation(&self, idx: [usize; 3]) -> Rotation {
        let (a, e, r) = self.angles(idx);
        viewpoint_rotation(a.to_radians(), e.to_radians(), r.to_radians())
    }

    /// Upper bound on the geodesic distance from any rotation to the grid:
    /// half a step along each of the three lattice axes.
    pub fn covering_radius(&self) -> f64 {
        0.5 * (360.0 / self.azimuth as f64 + 180.0 / self.elevation as f64 + 360.0 / self.inplane as f64)
    }
}

/// Object-to-camera rotation for a camera on the unit direction
/// `(cos e cos a, cos e sin a, sin e)` looking at the origin with world +z up
/// in the image, followed by a roll about the optical axis.
pub fn viewpoint_rotation(azimuth: f64, elevation: f64, roll: f64) -> Rotation {
    let d = Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
    look_at(&d, roll)
}

fn look_at(d: &Vector3<f64>, roll: f64) -> Rotation {
    let z = -d.normalize();
    let mut x = z.cross(&Vector3::z());
    if x.norm() < 1e-9 {
        x = z.cross(&Vector3::x());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Rotation::rot_z(roll) * Rotation::orthonormalize(&m)
}

pub fn sample_viewpoints(grid: &ViewpointGrid) -> Vec<([usize; 3], Rotation)> {
    grid.indices().map(|i| (i, grid.rotation(i))).collect()
}

/// Fibonacci-sphere viewpoints × uniform rolls; an alternative sampling that
/// is not used for the descriptor layout.
pub fn fibonacci_viewpoints(points: usize, inplane: usize) -> Vec<Rotation> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut out = Vec::with_capacity(points * inplane);
    for i in 0..points {
        let zc = 1.0 - 2.0 * (i as f64 + 0.5) / points as f64;
        let r = (1.0 - zc * zc).sqrt();
        let phi = golden * i as f64;
        let d = Vector3::new(r * phi.cos(), r * phi.sin(), zc);
        for k in 0..inplane {
            out.push(look_at(&d, std::f64::consts::TAU * k as f64 / inplane as f64));
        }
    }
    out
}

/// Settings for [`build_database`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatabaseConfig {
    /// Lattice dimensions (azimuth, elevation, in-plane).
    pub grid: [usize; 3],
    /// Camera distance as a multiple of the mesh diameter.
    pub radius_scale: f64,
    /// Template crop side length, pixels.
    pub template_size: usize,
    /// Padding around the mask bounding box, fraction of its longer side.
    pub pad_fraction: f64,
}

impl Default for DatabaseConfig {
    fn default() -> Self {
        Self {
            grid: [16, 8, 4],
            radius_scale: 2.5,
            template_size: 128,
            pad_fraction: 0.1,
        }
    }
}

/// One rendered viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub index: [usize; 3],
    /// Model → template camera at the grid radius.
    pub pose: Pose,
    /// Square window of the full-size render this template covers.
    pub crop: CropWindow,
    /// Intrinsics of the crop camera.
    pub intrinsics: CameraIntrinsics,
    /// Crop-resolution maps on the storage lattice.
    pub render: RenderOutput,
    /// Foreground-averaged features per level.
    pub descriptors: Vec<Vec<f64>>,
    /// Reduced last-level features used for viewpoint matching.
    pub match_features: FeatureMap,
    pub match_mask: Mask,
    match_normalized: Vec<f64>,
}

impl Template {
    pub fn rotation(&self) -> &Rotation {
        &self.pose.rotation
    }

    /// Full feature pyramid of the template crop (recomputed on demand).
    pub fn features(&self, extractor: &dyn FeatureExtractor) -> Result<Vec<FeatureMap>> {
        extractor.extract(&self.render.color)
    }

    /// Centered unit vectors of `match_features`, zero where constant.
    pub fn match_normalized(&self) -> &[f64] {
        &self.match_normalized
    }
}

/// Matching-stage inputs derived from a crop render.
pub(crate) struct MatchInputs {
    pub features: FeatureMap,
    pub mask: Mask,
    pub normalized: Vec<f64>,
}

pub(crate) fn match_inputs(features: &[FeatureMap], mask: &Mask, reduction: &Reduction) -> Result<MatchInputs> {
    let last = features.last().ok_or(OsopError::EmptyMask)?;
    let reduced = reduction.apply(last)?;
    let m = mask_at_level(mask, last.level, last.width(), last.height());
    let d = reduced.depth();
    let mut normalized = vec![0.0; reduced.data().len()];
    for ((px, dst), &fg) in reduced.pixels().zip(normalized.chunks_exact_mut(d)).zip(m.data()) {
        if fg {
            if let Some(n) = centered_unit(px) {
                dst.copy_from_slice(&n);
            }
        }
    }
    Ok(MatchInputs {
        features: reduced,
        mask: m,
        normalized,
    })
}

/// The 4D object descriptor together with all templates.
#[derive(Debug, Clone)]
pub struct TemplateDatabase {
    pub object_id: String,
    pub grid: ViewpointGrid,
    /// Camera the full-size template renders used.
    pub camera: CameraIntrinsics,
    pub config: DatabaseConfig,
    pub extractor: ExtractorConfig,
    /// Depth PNG unit, mm.
    pub depth_scale: f64,
    mesh: Mesh,
    templates: Vec<Template>,
    descriptors: Vec<DescriptorTensor>,
    reduction: Reduction,
}

fn depth_scale_for(grid: &ViewpointGrid, mesh: &Mesh) -> f64 {
    // Keeps the farthest surface point well inside 16 bits.
    let far = grid.radius + mesh.diameter();
    (far / 60000.0 * 1e4).ceil() / 1e4
}

/// Rounds to the nearest `f32`, so the on-disk tensor is lossless.
fn to_f32_lattice(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn build_template(
    mesh: &Mesh,
    idx: [usize; 3],
    rotation: Rotation,
    grid: &ViewpointGrid,
    k: &CameraIntrinsics,
    cfg: &DatabaseConfig,
    depth_scale: f64,
    extractor: &dyn FeatureExtractor,
    reduction: &Reduction,
) -> Result<Template> {
    let pose = Pose::new(rotation, Vector3::new(0.0, 0.0, grid.radius));
    let empty = |e: OsopError| match e {
        OsopError::EmptyRender => OsopError::EmptyTemplate { index: idx },
        other => other,
    };
    let full = render(mesh, &pose, k).map_err(empty)?;
    let bbox = full.mask.bounding_box().ok_or(OsopError::EmptyTemplate { index: idx })?;
    let crop = CropWindow::around_box(bbox, cfg.pad_fraction, cfg.template_size);
    let ck = k.cropped(crop.ox, crop.oy, crop.step, crop.size);
    let out = render(mesh, &pose, &ck).map_err(empty)?.quantized(depth_scale);
    let features = extractor.extract(&out.color)?;
    let descriptors = features
        .iter()
        .map(|f| {
            let m = mask_at_level(&out.mask, f.level, f.width(), f.height());
            average_descriptor(f, &m).map(to_f32_lattice)
        })
        .collect::<Result<Vec<_>>>()?;
    let mi = match_inputs(&features, &out.mask, reduction)?;
    Ok(Template {
        index: idx,
        pose,
        crop,
        intrinsics: ck,
        render: out,
        descriptors,
        match_features: mi.features,
        match_mask: mi.mask,
        match_normalized: mi.normalized,
    })
}

fn assemble_descriptors(templates: &[Template], dims: [usize; 3], ext: &ExtractorConfig) -> Result<Vec<DescriptorTensor>> {
    (0..ext.levels)
        .map(|l| {
            let data: Vec<f64> = templates.iter().flat_map(|t| t.descriptors[l].iter().copied()).collect();
            DescriptorTensor::new(dims, ext.depths[l], data)
        })
        .collect()
}

/// Renders every grid viewpoint, crops it and precomputes its features.
pub fn build_database(
    mesh: &Mesh,
    object_id: &str,
    cfg: &DatabaseConfig,
    k: &CameraIntrinsics,
    extractor: &dyn FeatureExtractor,
) -> Result<TemplateDatabase> {
    let ext = extractor.config().clone();
    ext.validate()?;
    if cfg.template_size == 0 || !(cfg.pad_fraction >= 0.0) {
        return Err(OsopError::InvalidConfig("template size and padding must be positive".into()));
    }
    crate::features::level_sizes(cfg.template_size, cfg.template_size, ext.levels)?;
    let grid = ViewpointGrid::new(cfg.grid[0], cfg.grid[1], cfg.grid[2], cfg.radius_scale * mesh.diameter())?;
    let reduction = Reduction::for_config(&ext)?;
    let depth_scale = depth_scale_for(&grid, mesh);
    let views = sample_viewpoints(&grid);
    let templates = views
        .into_par_iter()
        .map(|(idx, r)| build_template(mesh, idx, r, &grid, k, cfg, depth_scale, extractor, &reduction))
        .collect::<Result<Vec<_>>>()?;
    let descriptors = assemble_descriptors(&templates, grid.dims(), &ext)?;
    Ok(TemplateDatabase {
        object_id: object_id.to_string(),
        grid,
        camera: *k,
        config: cfg.clone(),
        extractor: ext,
        depth_scale,
        mesh: mesh.clone(),
        templates,
        descriptors,
        reduction,
    })
}

#[derive(Serialize, Deserialize)]
struct TemplateMeta {
    index: [usize; 3],
    crop: CropWindow,
}

#[derive(Serialize, Deserialize)]
struct DescriptorShape {
    level: usize,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    object_id: String,
    grid: ViewpointGrid,
    camera: CameraIntrinsics,
    config: DatabaseConfig,
    extractor: ExtractorConfig,
    depth_scale: f64,
    nocs_box: NocsBox,
    diameter: f64,
    descriptors: Vec<DescriptorShape>,
    templates: Vec<TemplateMeta>,
}

fn template_dir_name(idx: [usize; 3]) -> String {
    format!("{}_{}_{}", idx[0], idx[1], idx[2])
}

impl TemplateDatabase {
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn template(&self, idx: [usize; 3]) -> &Template {
        &self.templates[self.descriptors[0].flat_index(idx)]
    }

    /// o^k for k = 1..N.
    pub fn descriptors(&self) -> &[DescriptorTensor] {
        &self.descriptors
    }

    pub fn reduction(&self) -> &Reduction {
        &self.reduction
    }

    pub fn nocs_box(&self) -> NocsBox {
        self.mesh.nocs_box()
    }

    /// Errors unless `cfg` is the configuration the database was built with.
    pub fn check_extractor(&self, cfg: &ExtractorConfig) -> Result<()> {
        if cfg != &self.extractor {
            return Err(OsopError::ConfigMismatch(format!(
                "database built with {:?}, query uses {:?}",
                self.extractor, cfg
            )));
        }
        Ok(())
    }

    /// Writes `<root>/<object_id>/…`; returns the object directory.
    pub fn save(&self, root: &Path) -> Result<std::path::PathBuf> {
        let dir = root.join(&self.object_id);
        fs::create_dir_all(dir.join("templates"))?;
        let mut shapes = Vec::new();
        let mut offset = 0;
        for (l, o) in self.descriptors.iter().enumerate() {
            let [x, y, z] = o.dims;
            shapes.push(DescriptorShape {
                level: l + 1,
                shape: [x, y, z, o.depth],
                offset,
            });
            offset += o.data().len();
        }
        let meta = Meta {
            format_version: FORMAT_VERSION,
            object_id: self.object_id.clone(),
            grid: self.grid,
            camera: self.camera,
            config: self.config.clone(),
            extractor: self.extractor.clone(),
            depth_scale: self.depth_scale,
            nocs_box: self.mesh.nocs_box(),
            diameter: self.mesh.diameter(),
            descriptors: shapes,
            templates: self.templates.iter().map(|t| TemplateMeta { index: t.index, crop: t.crop }).collect(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        mesh_io::write_ply(&self.mesh, BufWriter::new(fs::File::create(dir.join("model.ply"))?))?;

        let mut w = BufWriter::new(fs::File::create(dir.join("descriptors.bin"))?);
        for o in &self.descriptors {
            for &x in o.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;

        self.templates.par_iter().try_for_each(|t| -> Result<()> {
            let td = dir.join("templates").join(template_dir_name(t.index));
            fs::create_dir_all(&td)?;
            write_depth_png(&t.render.depth, self.depth_scale, &td.join("depth.png"), false)?;
            write_mask_png(&t.render.mask, &td.join("mask.png"))?;
            write_color_png(&t.render.nocs, &td.join("nocs.png"))?;
            write_color_png(&t.render.color, &td.join("color.png"))?;
            fs::write(td.join("pose.json"), serde_json::to_string_pretty(&t.pose)?)?;
            Ok(())
        })?;
        Ok(dir)
    }

    /// Loads an object directory written by [`save`](Self::save). The
    /// extractor must match the stored configuration.
    pub fn load(dir: &Path, extractor: &dyn FeatureExtractor) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(OsopError::Format(format!("unsupported database version {}", meta.format_version)));
        }
        if extractor.config() != &meta.extractor {
            return Err(OsopError::ConfigMismatch(format!(
                "database built with {:?}, query uses {:?}",
                meta.extractor,
                extractor.config()
            )));
        }
        meta.grid.validate()?;
        let mesh = mesh_io::load_mesh(&dir.join("model.ply"))?;
        let reduction = Reduction::for_config(&meta.extractor)?;

        let mut bytes = Vec::new();
        BufReader::new(fs::File::open(dir.join("descriptors.bin"))?).read_to_end(&mut bytes)?;
        if bytes.len() % 4 != 0 {
            return Err(OsopError::Format("descriptors.bin length is not a multiple of 4".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut descriptors = Vec::new();
        for s in &meta.descriptors {
            let [x, y, z, d] = s.shape;
            let n = x * y * z * d;
            let slice = values
                .get(s.offset..s.offset + n)
                .ok_or_else(|| OsopError::Format("descriptors.bin is truncated".into()))?;
            descriptors.push(DescriptorTensor::new([x, y, z], d, slice.to_vec())?);
        }
        if descriptors.len() != meta.extractor.levels || meta.templates.len() != meta.grid.count() {
            return Err(OsopError::Format("meta.json is inconsistent with the grid".into()));
        }

        let templates = meta
            .templates
            .par_iter()
            .enumerate()
            .map(|(j, tm)| -> Result<Template> {
                let td = dir.join("templates").join(template_dir_name(tm.index));
                let pose: Pose = serde_json::from_str(&fs::read_to_string(td.join("pose.json"))?)?;
                let render = RenderOutput {
                    depth: read_depth_png(&td.join("depth.png"), Some(meta.depth_scale))?,
                    mask: read_mask_png(&td.join("mask.png"))?,
                    nocs: read_color_png(&td.join("nocs.png"))?,
                    color: read_color_png(&td.join("color.png"))?,
                };
                let features = extractor.extract(&render.color)?;
                let mi = match_inputs(&features, &render.mask, &reduction)?;
                let c = tm.crop;
                Ok(Template {
                    index: tm.index,
                    pose,
                    crop: c,
                    intrinsics: meta.camera.cropped(c.ox, c.oy, c.step, c.size),
                    render,
                    descriptors: descriptors.iter().map(|o| o.entry(j).to_vec()).collect(),
                    match_features: mi.features,
                    match_mask: mi.mask,
                    match_normalized: mi.normalized,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            object_id: meta.object_id,
            grid: meta.grid,
            camera: meta.camera,
            config: meta.config,
            extractor: meta.extractor,
            depth_scale: meta.depth_scale,
            mesh,
            templates,
            descriptors,
            reduction,
        })
    }
}

/// Grid indices sorted by geodesic distance to `rotation`; ties keep
/// lexicographic index order.
pub fn nearest_templates(db: &TemplateDatabase, rotation: &Rotation, n: usize) -> Vec<[usize; 3]> {
    let mut d: Vec<(f64, [usize; 3])> = db
        .templates()
        .iter()
        .map(|t| (geodesic_angle(rotation, t.rotation()), t.index))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(n).map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LocalStatsExtractor;
    use crate::scene::shapes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_db(grid: [usize; 3]) -> TemplateDatabase {
        let mesh = shapes::builtin("box").unwrap();
        let k = CameraIntrinsics::new(160.0, 160.0, 64.0, 64.0, 128, 128).unwrap();
        let cfg = DatabaseConfig {
            grid,
            template_size: 32,
            ..Default::default()
        };
        build_database(&mesh, "box", &cfg, &k, &LocalStatsExtractor::default()).unwrap()
    }

    #[test]
    fn single_view_looks_along_minus_x() {
        let g = ViewpointGrid::new(1, 1, 1, 100.0).unwrap();
        let views = sample_viewpoints(&g);
        assert_eq!(views.len(), 1);
        let r = &views[0].1;
        // Optical axis in model frame is the third row; camera sits on +x.
        let axis = r.matrix().row(2).transpose();
        assert!((axis - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let pose = Pose::new(*r, Vector3::new(0.0, 0.0, 100.0));
        let cam_center = pose.inverse().apply(&Vector3::zeros());
        assert!((cam_center - Vector3::new(100.0, 0.0, 0.0)).norm() < 1e-9);
        // World up projects to image up (negative v).
        assert!(r.apply(&Vector3::z()).y < 0.0);
    }

    #[test]
    fn grid_rotations_are_distinct() {
        let g = ViewpointGrid::new(8, 4, 4, 1.0).unwrap();
        let views = sample_viewpoints(&g);
        assert_eq!(views.len(), 128);
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                assert!(geodesic_angle(&views[i].1, &views[j].1) > 0.0);
            }
        }
    }

    #[test]
    fn large_grids_are_representable() {
        // Roughly the paper's 90K templates; only the index arithmetic is checked.
        let g = ViewpointGrid::new(60, 30, 50, 1.0).unwrap();
        assert_eq!(g.count(), 90_000);
        assert_eq!(g.indices().nth(89_999), Some([59, 29, 49]));
        assert!(ViewpointGrid::new(0, 1, 1, 1.0).is_err());
    }

    #[test]
    fn default_grid_covers_random_rotations() {
        let d = DatabaseConfig::default().grid;
        let g = ViewpointGrid::new(d[0], d[1], d[2], 1.0).unwrap();
        let rots: Vec<Rotation> = sample_viewpoints(&g).into_iter().map(|v| v.1).collect();
        let bound = g.covering_radius();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let q = Rotation::random(&mut rng);
            let best = rots.iter().map(|r| geodesic_angle(&q, r)).fold(f64::INFINITY, f64::min);
            assert!(best <= bound, "{best} > {bound}");
        }
    }

    #[test]
    fn fibonacci_option_produces_valid_rotations() {
        let r = fibonacci_viewpoints(20, 3);
        assert_eq!(r.len(), 60);
        for x in &r {
            assert!(Rotation::from_matrix(*x.matrix()).is_ok());
        }
    }

    #[test]
    fn parse_grid_dims() {
        assert_eq!(ViewpointGrid::parse_dims("16x8x4").unwrap(), [16, 8, 4]);
        assert!(ViewpointGrid::parse_dims("16x8").is_err());
        assert!(ViewpointGrid::parse_dims("0x1x1").is_err());
    }

    #[test]
    fn database_shapes_and_descriptors() {
        let db = small_db([4, 2, 2]);
        assert_eq!(db.len(), 16);
        for (l, o) in db.descriptors().iter().enumerate() {
            assert_eq!(o.dims, [4, 2, 2]);
            assert_eq!(o.depth, db.extractor.depths[l]);
        }
        let ext = LocalStatsExtractor::default();
        for t in db.templates() {
            let j = db.descriptors()[0].flat_index(t.index);
            assert_eq!(&db.templates()[j].index, &t.index);
            let feats = t.features(&ext).unwrap();
            for (l, f) in feats.iter().enumerate() {
                assert_eq!(db.descriptors()[l].entry(j), t.descriptors[l].as_slice());
                // Independent mean over the pooled foreground.
                let m = t.render.mask.max_pool(1 << l, f.width(), f.height());
                let mut sum = vec![0.0; f.depth()];
                let mut n = 0.0;
                for v in 0..f.height() {
                    for u in 0..f.width() {
                        if *m.get(u, v) {
                            n += 1.0;
                            for (s, x) in sum.iter_mut().zip(f.pixel(u, v)) {
                                *s += x;
                            }
                        }
                    }
                }
                for (a, s) in t.descriptors[l].iter().zip(&sum) {
                    // Stored on the f32 lattice.
                    assert!((a - s / n).abs() <= 1e-7 * (s / n).abs().max(1e-12) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let a = small_db([2, 2, 2]);
        let b = small_db([2, 2, 2]);
        assert_eq!(a.templates(), b.templates());
        assert_eq!(a.descriptors(), b.descriptors());
    }

    #[test]
    fn nearest_templates_matches_brute_force() {
        let db = small_db([8, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = Rotation::random(&mut rng);
            let got = nearest_templates(&db, &q, db.len());
            let mut all: Vec<([usize; 3], f64)> =
                db.grid.indices().map(|i| (i, geodesic_angle(&q, &db.grid.rotation(i)))).collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(got, all.iter().map(|x| x.0).collect::<Vec<_>>());
        }
        let t = &db.templates()[37];
        let first = nearest_templates(&db, t.rotation(), 3);
        assert_eq!(first[0], t.index);
    }

    #[test]
    fn save_load_roundtrip() {
        let db = small_db([2, 2, 2]);
        let dir = tempfile::tempdir().unwrap();
        let obj = db.save(dir.path()).unwrap();
        assert!(obj.join("templates/1_0_1/nocs.png").exists());
        let back = TemplateDatabase::load(&obj, &LocalStatsExtractor::default()).unwrap();
        assert_eq!(back.descriptors(), db.descriptors());
        assert_eq!(back.templates(), db.templates());
        assert_eq!(back.grid, db.grid);

        let other = LocalStatsExtractor::new(3, vec![1, 2], 8, 7).unwrap();
        assert!(matches!(TemplateDatabase::load(&obj, &other), Err(OsopError::ConfigMismatch(_))));
    }
}
