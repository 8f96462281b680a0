//! Browser demo: render a built-in object, generate a synthetic scene and
//! estimate the object's pose in it.
//!
//! Images cross the boundary as RGBA bytes; structured results as JSON.

use nalgebra::Vector3;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use osop::features::LocalStatsExtractor;
use osop::geometry::{CameraIntrinsics, Pose};
use osop::image::{ColorImage, Mask};
use osop::metrics::{add_score, ADD_THRESHOLD};
use osop::pipeline::{detect, DetectConfig, Injection, Mode, Observation};
use osop::render::render;
use osop::scene::{generate_suite, render_spec, MeshLibrary, Scene, SceneSpec, SuiteConfig};
use osop::template_db::{build_database, viewpoint_rotation, DatabaseConfig, TemplateDatabase};

const IMAGE_SIZE: usize = 128;

fn js_err(e: osop::OsopError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba(img: &ColorImage) -> Vec<u8> {
    img.data()
        .iter()
        .flat_map(|c| {
            let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(c[0]), q(c[1]), q(c[2]), 255]
        })
        .collect()
}

/// Darkens everything outside `mask` and draws `outline` pixels in white.
fn overlay(img: &ColorImage, mask: &Mask, outline: &[(usize, usize)]) -> Vec<u8> {
    let mut out = img.clone();
    for (c, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if !m {
            *c = c.map(|x| x * 0.35);
        }
    }
    for &(u, v) in outline {
        out.set(u, v, [1.0, 1.0, 1.0]);
    }
    rgba(&out)
}

/// Boundary pixels of a rendered silhouette.
fn silhouette_edge(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = mask.dims();
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if !*mask.get(u, v) {
                continue;
            }
            let edge = u == 0
                || v == 0
                || u + 1 == w
                || v + 1 == h
                || !*mask.get(u - 1, v)
                || !*mask.get(u + 1, v)
                || !*mask.get(u, v - 1)
                || !*mask.get(u, v + 1);
            if edge {
                out.push((u, v));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct DetectReport {
    template: [usize; 3],
    inliers: usize,
    hypotheses: usize,
    add_mm: f64,
    add_fraction: f64,
    correct: bool,
    mask_iou: f64,
    total_ms: f64,
    estimate: Pose,
    ground_truth: Pose,
}

#[wasm_bindgen]
pub struct Demo {
    meshes: MeshLibrary,
    object: String,
    camera: CameraIntrinsics,
    extractor: LocalStatsExtractor,
    db: TemplateDatabase,
    scene: Option<(SceneSpec, Scene)>,
    overlay: Vec<u8>,
}

#[wasm_bindgen]
impl Demo {
    /// Builds a 128-template database for a built-in object.
    #[wasm_bindgen(constructor)]
    pub fn new(object: &str) -> Result<Demo, JsValue> {
        let mut meshes = MeshLibrary::new();
        meshes.load(object).map_err(js_err)?;
        let suite = SuiteConfig::default();
        let camera = suite.camera().map_err(js_err)?;
        let extractor = LocalStatsExtractor::default();
        let cfg = DatabaseConfig {
            grid: [8, 4, 4],
            template_size: 64,
            ..Default::default()
        };
        let mesh = meshes.get(object).map_err(js_err)?;
        let db = build_database(mesh, object, &cfg, &camera, &extractor).map_err(js_err)?;
        Ok(Demo {
            meshes,
            object: object.to_string(),
            camera,
            extractor,
            db,
            scene: None,
            overlay: Vec::new(),
        })
    }

    pub fn size(&self) -> usize {
        IMAGE_SIZE
    }

    pub fn templates(&self) -> usize {
        self.db.len()
    }

    /// Renders the object from a viewpoint on the sphere (degrees); `nocs`
    /// selects the coordinate map instead of the texture.
    pub fn render_view(&self, azimuth: f64, elevation: f64, roll: f64, nocs: bool) -> Result<Vec<u8>, JsValue> {
        let mesh = self.meshes.get(&self.object).map_err(js_err)?;
        let r = viewpoint_rotation(azimuth.to_radians(), elevation.to_radians(), roll.to_radians());
        let pose = Pose::new(r, Vector3::new(0.0, 0.0, 2.5 * mesh.diameter()) - r.apply(&mesh.centroid()));
        let out = render(mesh, &pose, &self.camera).map_err(js_err)?;
        Ok(rgba(if nocs { &out.nocs } else { &out.color }))
    }

    /// Generates a random scene containing the object; returns its image.
    pub fn new_scene(&mut self, seed: u64, occluded: bool) -> Result<Vec<u8>, JsValue> {
        let cfg = SuiteConfig {
            scenes: 1,
            seed,
            objects: vec![self.object.clone()],
            occluder_probability: if occluded { 1.0 } else { 0.0 },
            ..Default::default()
        };
        let spec = generate_suite(&cfg, &mut self.meshes).map_err(js_err)?.remove(0);
        let scene = render_spec(&spec, &self.meshes).map_err(js_err)?;
        let img = rgba(&scene.color);
        self.scene = Some((spec, scene));
        self.overlay.clear();
        Ok(img)
    }

    /// Estimates the pose in the current scene. Returns a JSON report; the
    /// overlay is available from [`Demo::last_overlay`].
    pub fn detect(&mut self, use_depth: bool, multi_hypothesis: bool) -> Result<String, JsValue> {
        let (spec, scene) = self.scene.as_ref().ok_or_else(|| JsValue::from_str("no scene yet"))?;
        let cfg = DetectConfig {
            mode: if use_depth { Mode::Depth } else { Mode::Rgb },
            multi_hypothesis,
            ..Default::default()
        };
        let obs = Observation {
            image: &scene.color,
            depth: Some(&scene.depth),
            camera: &self.camera,
        };
        let det = detect(&obs, &self.db, &self.extractor, &cfg, &Injection::default()).map_err(js_err)?;
        let mesh = self.db.mesh();
        let add = add_score(&det.estimate.pose, &spec.pose, mesh, ADD_THRESHOLD);
        let report = DetectReport {
            template: det.template,
            inliers: det.estimate.inliers,
            hypotheses: det.hypotheses.len(),
            add_mm: add.error,
            add_fraction: add.error / mesh.diameter(),
            correct: add.correct,
            mask_iou: det.mask.iou(&scene.mask),
            total_ms: det.times.total(),
            estimate: det.estimate.pose,
            ground_truth: spec.pose,
        };
        let edge = render(mesh, &det.estimate.pose, &self.camera)
            .map(|r| silhouette_edge(&r.mask))
            .unwrap_or_default();
        self.overlay = overlay(&scene.color, &det.mask, &edge);
        serde_json::to_string(&report).map_err(|e| JsValue::from_str(&e.to_string()))
    }

    /// Scene with the predicted mask highlighted and the estimated silhouette
    /// outlined, as RGBA.
    pub fn last_overlay(&self) -> Vec<u8> {
        self.overlay.clone()
    }
}
