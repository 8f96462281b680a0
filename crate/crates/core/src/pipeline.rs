//! End-to-end detection: segment → match → correspondences → pose.

use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{segment_features, SegmentationConfig};
use crate::correspondence::{lift_to_2d3d, predict_correspondences, CorrespondenceSet, Match2d3d};
use crate::error::{OsopError, Result};
use crate::features::FeatureExtractor;
use crate::geometry::{CameraIntrinsics, Mesh, Pose, Rotation};
use crate::image::{ColorImage, CropWindow, DepthMap, Grid, Mask};
use crate::matching::{diversity_filter, match_prepared, MatchResult, PreparedQuery};
use crate::metrics::StageTimes;
use crate::render::render;
use crate::solvers::{icp_refine, ransac, IcpConfig, Match3d3d, Matches, PoseEstimate, RansacConfig, Refinement};
use crate::template_db::TemplateDatabase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// PnP on image correspondences.
    Rgb,
    /// Kabsch on correspondences lifted with the observed depth.
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub mode: Mode,
    pub multi_hypothesis: bool,
    /// ICP refinement of the final pose; depth mode only.
    pub icp: bool,
    /// Matches considered before the diversity filter.
    pub top_n: usize,
    /// Hypotheses kept after the diversity filter.
    pub hypotheses: usize,
    pub diversity_deg: f64,
    pub min_correlation: f64,
    /// Keep only the largest connected component of the segmentation.
    pub largest_component: bool,
    pub segmentation: SegmentationConfig,
    /// `threshold` is in pixels and applies to PnP.
    pub ransac: RansacConfig,
    /// Kabsch inlier threshold as a fraction of the object diameter.
    pub kabsch_threshold_fraction: f64,
    pub icp_config: IcpConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Depth,
            multi_hypothesis: false,
            icp: false,
            top_n: 100,
            hypotheses: 25,
            diversity_deg: 15.0,
            min_correlation: 0.3,
            largest_component: true,
            segmentation: SegmentationConfig {
                threshold_fraction: 0.85,
            },
            ransac: RansacConfig::default(),
            kabsch_threshold_fraction: 0.02,
            icp_config: IcpConfig::default(),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        self.ransac.validate()?;
        if self.top_n == 0 || self.hypotheses == 0 {
            return Err(OsopError::InvalidConfig("top_n and hypotheses must be positive".into()));
        }
        if self.icp && self.mode == Mode::Rgb {
            return Err(OsopError::InvalidConfig("ICP needs depth mode".into()));
        }
        if !(self.kabsch_threshold_fraction > 0.0) {
            return Err(OsopError::InvalidConfig("kabsch_threshold_fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Observations for one image. `depth` is required in depth mode.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub image: &'a ColorImage,
    pub depth: Option<&'a DepthMap>,
    pub camera: &'a CameraIntrinsics,
}

/// Ground-truth stand-ins for the predicted stages (upper-bound ablations).
#[derive(Debug, Clone, Default)]
pub struct Injection {
    pub mask: Option<Mask>,
    pub template: Option<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub template: [usize; 3],
    pub match_score: f64,
    pub correspondences: CorrespondenceSet,
    pub matches: Vec<Match2d3d>,
    pub estimate: PoseEstimate,
    /// Lower is better; `+∞` when the hypothesis has no support.
    pub verification: f64,
}

/// Hypotheses ordered best first.
#[derive(Debug, Clone, Default)]
pub struct HypothesisSet(Vec<Hypothesis>);

impl HypothesisSet {
    pub fn as_slice(&self) -> &[Hypothesis] {
        &self.0
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.0.first()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<Hypothesis> {
        self.0
    }
}

/// What the hypotheses are checked against.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    /// Observed depth inside the object mask.
    Depth { depth: &'a DepthMap, mask: &'a Mask },
    /// Each hypothesis's own 2D-3D correspondences.
    Correspondences,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub estimate: PoseEstimate,
    pub template: [usize; 3],
    pub match_score: f64,
    pub mask: Mask,
    pub crop: CropWindow,
    pub hypotheses: HypothesisSet,
    pub times: StageTimes,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn largest_component(mask: &Mask) -> Mask {
    let mut out = Grid::filled(mask.width(), mask.height(), false);
    if let Some(c) = mask.components().first() {
        for &(u, v) in c {
            out.set(u, v, true);
        }
    }
    out
}

/// Rotation of the object as seen by a camera looking straight at it.
///
/// Templates are rendered on the optical axis; an off-axis object at the same
/// rotation shows a slightly different side. The minimal rotation that takes
/// the viewing ray onto +z removes that offset.
pub fn viewing_rotation(pose: &Pose) -> Rotation {
    let ray = pose.translation.normalize();
    let z = Vector3::z();
    let axis = ray.cross(&z);
    let s = axis.norm();
    let align = if s < 1e-12 {
        Rotation::identity()
    } else {
        Rotation::from_axis_angle(&(axis / s), s.atan2(ray.dot(&z)))
    };
    align * pose.rotation
}

/// Runs the full pipeline on one image.
pub fn detect(
    obs: &Observation<'_>,
    db: &TemplateDatabase,
    extractor: &dyn FeatureExtractor,
    cfg: &DetectConfig,
    injection: &Injection,
) -> Result<Detection> {
    cfg.validate()?;
    db.check_extractor(extractor.config())?;
    let depth = match (cfg.mode, obs.depth) {
        (Mode::Depth, None) => return Err(OsopError::InvalidConfig("depth mode needs a depth map".into())),
        (Mode::Depth, Some(d)) => {
            if d.dims() != obs.image.dims() {
                return Err(OsopError::ResolutionMismatch("depth and color sizes differ".into()));
            }
            Some(d)
        }
        (Mode::Rgb, _) => None,
    };
    let mut times = StageTimes::default();

    let t = Instant::now();
    let mut mask = match &injection.mask {
        Some(m) => m.clone(),
        None => {
            let features = extractor.extract(obs.image)?;
            let (w, h) = obs.image.dims();
            segment_features(&features, db.descriptors(), w, h, &cfg.segmentation)?.mask
        }
    };
    if cfg.largest_component {
        mask = largest_component(&mask);
    }
    let bbox = mask.bounding_box().ok_or(OsopError::NoDetection)?;
    let size = db.config.template_size;
    let crop = CropWindow::around_box(bbox, db.config.pad_fraction, size);
    let crop_img = crop.sample_color(obs.image);
    let crop_mask = crop.sample_nearest(&mask, false);
    let crop_features = extractor.extract(&crop_img)?;
    times.segmentation = ms(t);

    let t = Instant::now();
    let candidates: Vec<MatchResult> = match injection.template {
        Some(idx) => vec![MatchResult {
            index: idx,
            score: f64::NAN,
            pose: db.template(idx).pose,
        }],
        None => {
            let query = PreparedQuery::new(&crop_features, &crop_mask, db)?;
            if cfg.multi_hypothesis {
                let top = match_prepared(&query, db, cfg.top_n)?;
                diversity_filter(&top, cfg.diversity_deg, cfg.hypotheses)
            } else {
                match_prepared(&query, db, 1)?
            }
        }
    };
    times.matching = ms(t);

    let t = Instant::now();
    let nocs_box = db.nocs_box();
    let lifted: Vec<(MatchResult, CorrespondenceSet, Vec<Match2d3d>)> = candidates
        .par_iter()
        .map(|m| -> Result<_> {
            let tmpl = db.template(m.index);
            let tf = tmpl.features(extractor)?;
            let cs = predict_correspondences(
                &crop_features[0],
                &crop_mask,
                &tf[0],
                &tmpl.render.mask,
                &tmpl.pose,
                &nocs_box,
                cfg.min_correlation,
            )?;
            let matches = lift_to_2d3d(&cs, &tmpl.render.nocs, &crop);
            Ok((m.clone(), cs, matches))
        })
        .collect::<Result<_>>()?;
    times.correspondence = ms(t);

    let t = Instant::now();
    let mesh = db.mesh();
    let kabsch_threshold = cfg.kabsch_threshold_fraction * mesh.diameter();
    let solved: Vec<Result<Hypothesis>> = lifted
        .into_par_iter()
        .map(|(m, cs, matches)| {
            let estimate = match depth {
                None => ransac(Matches::Points2d(&matches, obs.camera), &cfg.ransac)?,
                Some(d) => {
                    let m3 = lift_with_depth(&matches, d, obs.camera);
                    let rc = RansacConfig {
                        threshold: kabsch_threshold,
                        ..cfg.ransac
                    };
                    ransac(Matches::Points3d(&m3), &rc)?
                }
            };
            Ok(Hypothesis {
                template: m.index,
                match_score: m.score,
                correspondences: cs,
                matches,
                estimate,
                verification: f64::NAN,
            })
        })
        .collect();
    let mut first_err = None;
    let mut hyps = Vec::new();
    for r in solved {
        match r {
            Ok(h) => hyps.push(h),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if hyps.is_empty() {
        return Err(first_err.unwrap_or(OsopError::NoDetection));
    }
    let evidence = match depth {
        Some(d) => Evidence::Depth { depth: d, mask: &mask },
        None => Evidence::Correspondences,
    };
    let set = if hyps.len() > 1 {
        verify_hypotheses(hyps, mesh, obs.camera, evidence)
    } else {
        HypothesisSet(hyps)
    };
    let best = set.best().expect("non-empty hypothesis set");
    let mut estimate = best.estimate.clone();
    if let (true, Some(d)) = (cfg.icp, depth) {
        // A refinement that loses the object keeps the unrefined pose.
        if let Ok(p) = icp_refine(&estimate.pose, mesh, d, &mask, obs.camera, &cfg.icp_config) {
            estimate.pose = p;
            estimate.refinement = Refinement::Icp;
        }
    }
    times.solver = ms(t);

    Ok(Detection {
        estimate,
        template: best.template,
        match_score: best.match_score,
        mask,
        crop,
        times,
        hypotheses: set,
    })
}

/// Camera-frame points from the observed depth at each match's pixel.
fn lift_with_depth(matches: &[Match2d3d], depth: &DepthMap, k: &CameraIntrinsics) -> Vec<Match3d3d> {
    matches
        .iter()
        .filter_map(|m| {
            let (u, v) = (m.pixel.x.round(), m.pixel.y.round());
            if u < 0.0 || v < 0.0 || u >= depth.width() as f64 || v >= depth.height() as f64 {
                return None;
            }
            let z = *depth.get(u as usize, v as usize);
            (z > 0.0).then(|| Match3d3d {
                model: m.point,
                camera: k.unproject(u, v, z),
            })
        })
        .collect()
}

/// Scores every hypothesis against the evidence and sorts best first.
///
/// Depth: mean |rendered − observed| depth over pixels in both supports.
/// Correspondences: mean 3D distance between each predicted model point and
/// the model point rendered at its pixel; pixels the render misses cost one
/// diameter. Ties keep the input order.
pub fn verify_hypotheses(
    hyps: Vec<Hypothesis>,
    mesh: &Mesh,
    k: &CameraIntrinsics,
    evidence: Evidence<'_>,
) -> HypothesisSet {
    let nocs_box = mesh.nocs_box();
    let diameter = mesh.diameter();
    let mut scored: Vec<Hypothesis> = hyps
        .into_par_iter()
        .map(|mut h| {
            h.verification = match render(mesh, &h.estimate.pose, k) {
                Err(_) => f64::INFINITY,
                Ok(r) => match evidence {
                    Evidence::Depth { depth, mask } => {
                        let mut sum = 0.0;
                        let mut n = 0usize;
                        for (i, (&rd, &od)) in r.depth.data().iter().zip(depth.data()).enumerate() {
                            if rd > 0.0 && od > 0.0 && mask.data()[i] {
                                sum += (rd - od).abs();
                                n += 1;
                            }
                        }
                        if n == 0 {
                            f64::INFINITY
                        } else {
                            sum / n as f64
                        }
                    }
                    Evidence::Correspondences => {
                        if h.matches.is_empty() {
                            f64::INFINITY
                        } else {
                            let total: f64 = h
                                .matches
                                .iter()
                                .map(|m| {
                                    let (u, v) = (m.pixel.x.round(), m.pixel.y.round());
                                    if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                                        return diameter;
                                    }
                                    let (u, v) = (u as usize, v as usize);
                                    if !*r.mask.get(u, v) {
                                        return diameter;
                                    }
                                    let c = r.nocs.get(u, v);
                                    let p = nocs_box.decode(&Vector3::new(c[0], c[1], c[2]));
                                    (p - m.point).norm().min(diameter)
                                })
                                .sum();
                            total / h.matches.len() as f64
                        }
                    }
                },
            };
            h
        })
        .collect();
    scored.sort_by(|a, b| a.verification.total_cmp(&b.verification));
    HypothesisSet(scored)
}
