//! Seeded synthetic scenes: a textured object on a smooth background, with
//! optional occluders and sensor noise.

pub mod shapes;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OsopError, Result};
use crate::geometry::{load_mesh, CameraIntrinsics, Mesh, Pose, Rotation};
use crate::image::{ColorImage, DepthMap, Grid, Mask};
use crate::render::{render, render_scene, SceneObject};

/// Resolves a built-in mesh name (see [`shapes::BUILTIN_NAMES`]) or a mesh file path.
pub fn resolve_mesh(name: &str) -> Result<Mesh> {
    let base = name.split(':').next().unwrap_or(name);
    if shapes::BUILTIN_NAMES.contains(&base) {
        shapes::builtin(name)
    } else {
        load_mesh(Path::new(name))
    }
}

/// Meshes by id, loaded once.
#[derive(Debug, Default, Clone)]
pub struct MeshLibrary {
    meshes: BTreeMap<String, Mesh>,
}

impl MeshLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, mesh: Mesh) {
        self.meshes.insert(id.to_string(), mesh);
    }

    pub fn load(&mut self, id: &str) -> Result<&Mesh> {
        if !self.meshes.contains_key(id) {
            let m = resolve_mesh(id)?;
            self.meshes.insert(id.to_string(), m);
        }
        Ok(&self.meshes[id])
    }

    pub fn get(&self, id: &str) -> Result<&Mesh> {
        self.meshes
            .get(id)
            .ok_or_else(|| OsopError::InvalidConfig(format!("mesh '{id}' not loaded")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub mesh: String,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Gaussian color noise, [0, 1] units.
    pub color_sigma: f64,
    /// Gaussian depth noise, mm.
    pub depth_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            color_sigma: 0.01,
            depth_sigma: 0.5,
        }
    }
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: usize,
    pub im_id: usize,
    /// Mesh id of the target object.
    pub obj_id: String,
    /// Ground-truth model → camera pose.
    pub pose: Pose,
    pub camera: CameraIntrinsics,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub seed: u64,
}

/// A rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub color: ColorImage,
    /// mm; the background plane has depth too.
    pub depth: DepthMap,
    /// Visible pixels of the target.
    pub mask: Mask,
    /// Fraction of the target's silhouette hidden by occluders.
    pub occlusion: f64,
}

/// Muted, low-contrast background color field.
fn background(w: usize, h: usize, seed: u64) -> ColorImage {
    let field = shapes::TextureField::new(Vector3::zeros(), 1.0, seed ^ 0xb4c4_9a0d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint: [f64; 3] = [rng.random_range(0.15..0.3), rng.random_range(0.25..0.4), rng.random_range(0.5..0.65)];
    Grid::from_fn(w, h, |u, v| {
        let p = Vector3::new(u as f64 / w as f64 - 0.5, v as f64 / h as f64 - 0.5, 0.0) * 0.8;
        let c = field.color(&p);
        let lum = (c[0] + c[1] + c[2]) / 3.0;
        [0, 1, 2].map(|k| (tint[k] + 0.35 * (lum - 0.5) + 0.1 * (c[k] - lum)).clamp(0.0, 1.0))
    })
}

/// Renders `spec`; `meshes` must hold the object and every occluder mesh.
pub fn render_spec(spec: &SceneSpec, meshes: &MeshLibrary) -> Result<Scene> {
    let k = &spec.camera;
    let mesh = meshes.get(&spec.obj_id)?;
    let mut objects = vec![SceneObject {
        mesh,
        pose: spec.pose,
    }];
    for o in &spec.occluders {
        objects.push(SceneObject {
            mesh: meshes.get(&o.mesh)?,
            pose: o.pose,
        });
    }
    let full = render(mesh, &spec.pose, k)?;
    let sr = render_scene(&objects, k)?;
    let mask = sr.object_mask(0);
    let full_count = full.mask.count();
    let occlusion = if full_count == 0 {
        1.0
    } else {
        1.0 - mask.count() as f64 / full_count as f64
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cn = Normal::new(0.0, spec.noise.color_sigma.max(0.0)).map_err(|e| OsopError::InvalidConfig(e.to_string()))?;
    let dn = Normal::new(0.0, spec.noise.depth_sigma.max(0.0)).map_err(|e| OsopError::InvalidConfig(e.to_string()))?;
    let bg = background(k.width, k.height, spec.seed);
    let plane = spec.pose.translation.z + mesh.diameter();
    let mut color = bg;
    let mut depth = Grid::filled(k.width, k.height, plane);
    for v in 0..k.height {
        for u in 0..k.width {
            if sr.labels.get(u, v).is_some() {
                color.set(u, v, *sr.output.color.get(u, v));
                depth.set(u, v, *sr.output.depth.get(u, v));
            }
        }
    }
    // Noise is drawn for every pixel in a fixed order so it does not depend on the content.
    for (c, d) in color.data_mut().iter_mut().zip(depth.data_mut().iter_mut()) {
        for ch in c.iter_mut() {
            *ch = (*ch + cn.sample(&mut rng)).clamp(0.0, 1.0);
        }
        *d = (*d + dn.sample(&mut rng)).max(0.0);
    }
    Ok(Scene {
        color,
        depth,
        mask,
        occlusion,
    })
}

/// Generator settings for a seeded scene suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub scenes: usize,
    pub seed: u64,
    /// Object mesh ids, cycled over scenes.
    pub objects: Vec<String>,
    pub image_size: usize,
    pub focal: f64,
    /// Object distance as a multiple of its diameter.
    pub distance_scale: [f64; 2],
    /// Max offset of the object center from the principal point, fraction of the image side.
    pub max_offset: f64,
    /// Probability that a scene gets an occluder.
    pub occluder_probability: f64,
    pub occluder_meshes: Vec<String>,
    pub noise: NoiseConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            seed: 0,
            objects: ["box", "prism", "lblock", "octa", "wedge"].map(String::from).to_vec(),
            image_size: 128,
            focal: 160.0,
            distance_scale: [2.3, 2.7],
            max_offset: 0.12,
            occluder_probability: 0.0,
            occluder_meshes: vec!["slab".into()],
            noise: NoiseConfig::default(),
        }
    }
}

impl SuiteConfig {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        let c = (self.image_size as f64 - 1.0) / 2.0;
        CameraIntrinsics::new(self.focal, self.focal, c, c, self.image_size, self.image_size)
    }
}

/// Deterministic scene specs; loads every referenced mesh into `meshes`.
pub fn generate_suite(cfg: &SuiteConfig, meshes: &mut MeshLibrary) -> Result<Vec<SceneSpec>> {
    if cfg.objects.is_empty() {
        return Err(OsopError::InvalidConfig("suite needs at least one object".into()));
    }
    let k = cfg.camera()?;
    for o in cfg.objects.iter().chain(&cfg.occluder_meshes) {
        meshes.load(o)?;
    }
    let mut out = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
        let obj_id = cfg.objects[i % cfg.objects.len()].clone();
        let mesh = meshes.get(&obj_id)?;
        let d = mesh.diameter();
        let z = d * rng.random_range(cfg.distance_scale[0]..=cfg.distance_scale[1]);
        let off = cfg.max_offset * k.width as f64;
        let (du, dv) = (rng.random_range(-off..=off), rng.random_range(-off..=off));
        // Model origin at the mesh centroid's projection offset by (du, dv).
        let r = Rotation::random(&mut rng);
        let center = r.apply(&mesh.centroid());
        let t = Vector3::new(du * z / k.fx, dv * z / k.fy, z) - center;
        let pose = Pose::new(r, t);
        let mut occluders = Vec::new();
        if !cfg.occluder_meshes.is_empty() && rng.random::<f64>() < cfg.occluder_probability {
            let name = cfg.occluder_meshes[rng.random_range(0..cfg.occluder_meshes.len())].clone();
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let lateral = Vector3::new(side * rng.random_range(0.5..0.8) * d, rng.random_range(-0.3..0.3) * d, 0.0);
            let oz = z * 0.7;
            let anchor = Vector3::new(t.x + center.x, t.y + center.y, 0.0) * (oz / z);
            occluders.push(Occluder {
                mesh: name,
                pose: Pose::new(Rotation::random(&mut rng), anchor + lateral * 0.7 + Vector3::new(0.0, 0.0, oz)),
            });
        }
        out.push(SceneSpec {
            scene_id: i,
            im_id: 0,
            obj_id,
            pose,
            camera: k,
            occluders,
            noise: cfg.noise,
            seed: rng.random(),
        });
    }
    Ok(out)
}

/// Suite file: either generator settings or explicit specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SuiteFile {
    Explicit { specs: Vec<SceneSpec> },
    Generated(SuiteConfig),
}

impl SuiteFile {
    pub fn specs(&self, meshes: &mut MeshLibrary) -> Result<Vec<SceneSpec>> {
        match self {
            SuiteFile::Explicit { specs } => {
                for s in specs {
                    meshes.load(&s.obj_id)?;
                    for o in &s.occluders {
                        meshes.load(&o.mesh)?;
                    }
                }
                Ok(specs.clone())
            }
            SuiteFile::Generated(cfg) => generate_suite(cfg, meshes),
        }
    }
}
