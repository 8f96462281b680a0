//! Dense 2D-2D correspondences between an object crop and a template, their
//! lifting to 2D-3D matches, and the per-pixel coordinate classification loss.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{centered_unit, dot};
use crate::error::{OsopError, Result};
use crate::features::FeatureMap;
use crate::geometry::{NocsBox, Pose};
use crate::image::{ColorImage, CropWindow, Grid, Mask};
use crate::render::RenderOutput;
use crate::spatial::PointGrid;

/// Default minimum peak correlation for predicted pairs.
pub const DEFAULT_MIN_CORRELATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencePair {
    /// Object crop pixel.
    pub p: [usize; 2],
    /// Template pixel.
    pub pp: [usize; 2],
    /// Model-frame distance of the two surface points, mm; 0 when the object
    /// side is unknown (predicted pairs).
    pub d3: f64,
    /// Peak correlation of a predicted pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<CorrespondencePair>,
    pub obj_pose: Option<Pose>,
    pub tmp_pose: Pose,
    pub nocs_box: NocsBox,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.pairs)?)
    }
}

/// Model-frame points of every foreground pixel, row-major.
fn foreground_points(r: &RenderOutput, b: &NocsBox) -> Vec<([usize; 2], Vector3<f64>)> {
    let mut out = Vec::new();
    for v in 0..r.height() {
        for u in 0..r.width() {
            if *r.mask.get(u, v) {
                let c = r.nocs.get(u, v);
                out.push(([u, v], b.decode(&Vector3::new(c[0], c[1], c[2]))));
            }
        }
    }
    out
}

/// For each object pixel, the template pixel whose surface point is nearest
/// in the model frame; pairs farther than `reject_thresh` mm are dropped.
pub fn gt_correspondences(
    obj: &RenderOutput,
    obj_pose: &Pose,
    tmp: &RenderOutput,
    tmp_pose: &Pose,
    nocs_box: &NocsBox,
    reject_thresh: f64,
) -> Result<CorrespondenceSet> {
    let op = foreground_points(obj, nocs_box);
    let tp = foreground_points(tmp, nocs_box);
    if op.is_empty() || tp.is_empty() {
        return Err(OsopError::EmptyForeground);
    }
    let index = PointGrid::new(tp.iter().map(|x| x.1).collect(), 0.0);
    let pairs = op
        .par_iter()
        .filter_map(|(p, x)| {
            let (j, d) = index.nearest_within(x, reject_thresh)?;
            (d <= reject_thresh).then_some(CorrespondencePair {
                p: *p,
                pp: tp[j].0,
                d3: d,
                score: None,
            })
        })
        .collect();
    Ok(CorrespondenceSet {
        pairs,
        obj_pose: Some(*obj_pose),
        tmp_pose: *tmp_pose,
        nocs_box: *nocs_box,
    })
}

fn normalized_foreground(f: &FeatureMap, mask: &Mask) -> Vec<([usize; 2], Vec<f64>)> {
    let mut out = Vec::new();
    for v in 0..f.height() {
        for u in 0..f.width() {
            if *mask.get(u, v) {
                if let Some(n) = centered_unit(f.pixel(u, v)) {
                    out.push(([u, v], n));
                }
            }
        }
    }
    out
}

/// Correlation-argmax correspondences at level-1 resolution.
///
/// `obj_f`/`tmp_f` are level-1 features of the object crop and the template
/// crop; masks are at the same resolution. Ties keep the first template pixel
/// in row-major order.
pub fn predict_correspondences(
    obj_f: &FeatureMap,
    obj_mask: &Mask,
    tmp_f: &FeatureMap,
    tmp_mask: &Mask,
    tmp_pose: &Pose,
    nocs_box: &NocsBox,
    min_correlation: f64,
) -> Result<CorrespondenceSet> {
    if obj_mask.dims() != (obj_f.width(), obj_f.height()) || tmp_mask.dims() != (tmp_f.width(), tmp_f.height()) {
        return Err(OsopError::ResolutionMismatch("mask and feature sizes differ".into()));
    }
    if obj_f.depth() != tmp_f.depth() {
        return Err(OsopError::DepthMismatch {
            expected: tmp_f.depth(),
            found: obj_f.depth(),
        });
    }
    if obj_mask.count() == 0 || tmp_mask.count() == 0 {
        return Err(OsopError::EmptyForeground);
    }
    let obj = normalized_foreground(obj_f, obj_mask);
    let tmp = normalized_foreground(tmp_f, tmp_mask);
    let pairs = obj
        .par_iter()
        .filter_map(|(p, a)| {
            let mut best = f64::NEG_INFINITY;
            let mut arg = None;
            for (q, b) in &tmp {
                let c = dot(a, b);
                if c > best {
                    best = c;
                    arg = Some(*q);
                }
            }
            let pp = arg?;
            (best >= min_correlation).then_some(CorrespondencePair {
                p: *p,
                pp,
                d3: 0.0,
                score: Some(best.min(1.0)),
            })
        })
        .collect();
    Ok(CorrespondenceSet {
        pairs,
        obj_pose: None,
        tmp_pose: *tmp_pose,
        nocs_box: *nocs_box,
    })
}

/// An image pixel matched to a model-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2d3d {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

/// Decodes the template NOCS at each `p′` and maps `p` from crop to image
/// coordinates through `crop`.
pub fn lift_to_2d3d(cs: &CorrespondenceSet, tmp_nocs: &ColorImage, crop: &CropWindow) -> Vec<Match2d3d> {
    cs.pairs
        .iter()
        .map(|c| {
            let n = tmp_nocs.get(c.pp[0], c.pp[1]);
            let (x, y) = crop.to_source(c.p[0] as f64, c.p[1] as f64);
            Match2d3d {
                pixel: Vector2::new(x, y),
                point: cs.nocs_box.decode(&Vector3::new(n[0], n[1], n[2])),
            }
        })
        .collect()
}

/// Object pixels colored by the NOCS value of their matched template pixel.
pub fn nocs_visualization(cs: &CorrespondenceSet, tmp_nocs: &ColorImage, width: usize, height: usize) -> ColorImage {
    let mut img = Grid::filled(width, height, [0.0; 3]);
    for c in &cs.pairs {
        if c.p[0] < width && c.p[1] < height {
            img.set(c.p[0], c.p[1], *tmp_nocs.get(c.pp[0], c.pp[1]));
        }
    }
    img
}

/// Per-pixel logits over template coordinate bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordLogits {
    /// Object map size.
    pub width: usize,
    pub height: usize,
    /// Bin grid over the template.
    pub bins: [usize; 2],
    /// Template size the bins cover.
    pub template: [usize; 2],
    /// `width · height · bins[0] · bins[1]` values, pixel-major.
    pub data: Vec<f64>,
}

impl CoordLogits {
    pub fn bin_count(&self) -> usize {
        self.bins[0] * self.bins[1]
    }

    /// Bin containing template pixel `pp`.
    pub fn bin_of(&self, pp: [usize; 2]) -> Result<usize> {
        if pp[0] >= self.template[0] || pp[1] >= self.template[1] {
            return Err(OsopError::BinMismatch(format!("template pixel {pp:?} outside {:?}", self.template)));
        }
        let bx = pp[0] * self.bins[0] / self.template[0];
        let by = pp[1] * self.bins[1] / self.template[1];
        Ok(by * self.bins[0] + bx)
    }

    fn logits_at(&self, p: [usize; 2]) -> Result<std::ops::Range<usize>> {
        if p[0] >= self.width || p[1] >= self.height {
            return Err(OsopError::BinMismatch(format!("object pixel {p:?} outside logits map")));
        }
        let b = self.bin_count();
        let i = (p[1] * self.width + p[0]) * b;
        Ok(i..i + b)
    }

    fn validate(&self) -> Result<()> {
        if self.bins[0] == 0 || self.bins[1] == 0 || self.bins[0] > self.template[0] || self.bins[1] > self.template[1] {
            return Err(OsopError::BinMismatch(format!("bins {:?} for template {:?}", self.bins, self.template)));
        }
        if self.data.len() != self.width * self.height * self.bin_count() {
            return Err(OsopError::BinMismatch("logit tensor has the wrong length".into()));
        }
        Ok(())
    }
}

/// −ln softmax(l)[c], computed without overflow.
fn nll(l: &[f64], c: usize) -> f64 {
    let s: f64 = l.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, x)| (x - l[c]).exp()).sum();
    s.ln_1p()
}

/// Mean cross-entropy between the softmax at each pair's object pixel and
/// the bin of its template pixel. An empty set has zero loss.
pub fn coord_class_loss(logits: &CoordLogits, gt: &CorrespondenceSet) -> Result<f64> {
    logits.validate()?;
    if gt.pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for c in &gt.pairs {
        let r = logits.logits_at(c.p)?;
        total += nll(&logits.data[r], logits.bin_of(c.pp)?);
    }
    Ok(total / gt.pairs.len() as f64)
}

/// Gradient of [`coord_class_loss`] with respect to every logit.
pub fn coord_class_loss_grad(logits: &CoordLogits, gt: &CorrespondenceSet) -> Result<Vec<f64>> {
    logits.validate()?;
    let mut g = vec![0.0; logits.data.len()];
    if gt.pairs.is_empty() {
        return Ok(g);
    }
    let n = gt.pairs.len() as f64;
    for c in &gt.pairs {
        let r = logits.logits_at(c.p)?;
        let bin = logits.bin_of(c.pp)?;
        let l = &logits.data[r.clone()];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
        for (j, gi) in g[r].iter_mut().enumerate() {
            let sm = (l[j] - m).exp() / z;
            *gi += (sm - if j == bin { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(g)
}
