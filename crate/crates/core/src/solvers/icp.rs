use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::kabsch::{kabsch, sum_squared_residual};
use crate::error::{OsopError, Result};
use crate::geometry::{CameraIntrinsics, Mesh, Pose, Rotation};
use crate::image::{DepthMap, Mask};
use crate::render::{backproject, render};
use crate::spatial::PointGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub iterations: usize,
    /// Pairs farther apart than this fraction of the diameter are ignored.
    pub trim_radius_fraction: f64,
    /// Fraction of the worst remaining pairs dropped each iteration.
    pub trim_fraction: f64,
    /// Pairs closer than this fraction of the diameter are exempt from trimming.
    pub keep_fraction: f64,
    /// Convergence thresholds on the per-iteration update.
    pub min_rotation_deg: f64,
    pub min_translation_mm: f64,
    /// The model is rendered at this multiple of the camera resolution so
    /// that each observed point has a close model point.
    pub supersample: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            trim_radius_fraction: 0.1,
            trim_fraction: 0.1,
            keep_fraction: 0.02,
            min_rotation_deg: 0.01,
            min_translation_mm: 0.01,
            supersample: 3,
        }
    }
}

/// Point-to-point ICP of the rendered model depth against the observed depth.
pub fn icp_refine(
    pose: &Pose,
    mesh: &Mesh,
    depth: &DepthMap,
    mask: &Mask,
    k: &CameraIntrinsics,
    cfg: &IcpConfig,
) -> Result<Pose> {
    let observed: Vec<_> = backproject(depth, k)
        .into_iter()
        .filter(|p| *mask.get(p.u, p.v))
        .map(|p| p.point)
        .collect();
    if observed.is_empty() {
        return Err(OsopError::EmptyOverlap);
    }
    let radius = cfg.trim_radius_fraction * mesh.diameter();
    let keep_floor = cfg.keep_fraction * mesh.diameter();
    // Odd factors keep every camera pixel center on the fine grid.
    let s = cfg.supersample.max(1) | 1;
    let sf = s as f64;
    let fine = CameraIntrinsics::new(
        k.fx * sf,
        k.fy * sf,
        k.cx * sf + (sf - 1.0) / 2.0,
        k.cy * sf + (sf - 1.0) / 2.0,
        k.width * s,
        k.height * s,
    )?;
    let observed_index = PointGrid::new(observed.clone(), 0.0);
    let scale = 0.5 * mesh.diameter();
    let mut history: Vec<(Vector6<f64>, f64)> = Vec::new();
    let mut current = *pose;
    for _ in 0..cfg.iterations {
        let rendered = match render(mesh, &current, &fine) {
            Ok(r) => r,
            Err(OsopError::EmptyRender) => return Err(OsopError::EmptyOverlap),
            Err(e) => return Err(e),
        };
        let fine_points = backproject(&rendered.depth, &fine);
        let coarse: Vec<Vector3<f64>> = fine_points
            .iter()
            .filter(|p| p.u % s == s / 2 && p.v % s == s / 2)
            .map(|p| p.point)
            .collect();
        let model: Vec<_> = fine_points.into_iter().map(|p| p.point).collect();
        if model.is_empty() {
            return Err(OsopError::EmptyOverlap);
        }
        // Pairs in both directions: observed → model and model → observed.
        let index = PointGrid::new(model, 0.0);
        let mut pairs: Vec<(f64, Vector3<f64>, Vector3<f64>)> = observed
            .iter()
            .filter_map(|q| {
                let (j, d) = index.nearest_within(q, radius)?;
                (d <= radius).then_some((d, index.points()[j], *q))
            })
            .collect();
        pairs.extend(coarse.iter().filter_map(|m| {
            let (j, d) = observed_index.nearest_within(m, radius)?;
            (d <= radius).then_some((d, *m, observed_index.points()[j]))
        }));
        if pairs.len() < 3 {
            return Err(OsopError::EmptyOverlap);
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut keep = ((pairs.len() as f64) * (1.0 - cfg.trim_fraction)).ceil().max(3.0) as usize;
        // Small residuals are never trimmed: near convergence the largest ones
        // are the silhouette pairs that carry the in-plane signal.
        while keep < pairs.len() && pairs[keep].0 <= keep_floor {
            keep += 1;
        }
        pairs.truncate(keep);
        let src: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let dst: Vec<_> = pairs.iter().map(|p| p.2).collect();
        let delta = match kabsch(&src, &dst) {
            Ok(d) => d,
            Err(OsopError::DegenerateConfiguration) => break,
            Err(e) => return Err(e),
        };
        let mse = sum_squared_residual(&delta, &src, &dst) / src.len() as f64;
        current = delta.compose(&current);
        history.push((state(&current, scale), mse));
        if let Some(v) = acceleration(&history) {
            // Consistent drift (sliding along flat faces): jump ahead instead
            // of treating the small steps as convergence.
            let (x, _) = history[history.len() - 1];
            let (prev, _) = history[history.len() - 2];
            let dir = (x - prev).normalize();
            let w = current.rotation.log() + dir.fixed_rows::<3>(0) * (v / scale);
            current = Pose::new(Rotation::exp(&w), current.translation + dir.fixed_rows::<3>(3) * v);
            history.clear();
            continue;
        }
        // The update is measured over a short window so that slow sliding
        // is not mistaken for convergence.
        if history.len() > CONVERGENCE_WINDOW {
            let back = history.len() - 1 - CONVERGENCE_WINDOW;
            let step = history[history.len() - 1].0 - history[back].0;
            let rot = step.fixed_rows::<3>(0).norm() / scale;
            let tr = step.fixed_rows::<3>(3).norm();
            if rot.to_degrees() < cfg.min_rotation_deg && tr < cfg.min_translation_mm {
                break;
            }
        }
    }
    Ok(current)
}

const CONVERGENCE_WINDOW: usize = 4;

/// Registration state with rotation scaled to a length.
fn state(p: &Pose, scale: f64) -> Vector6<f64> {
    let w = p.rotation.log() * scale;
    Vector6::new(w.x, w.y, w.z, p.translation.x, p.translation.y, p.translation.z)
}

/// Besl–McKay extrapolation distance along the last update when the last
/// three updates point the same way.
fn acceleration(history: &[(Vector6<f64>, f64)]) -> Option<f64> {
    const MAX_ANGLE: f64 = 10.0;
    let n = history.len();
    if n < 4 {
        return None;
    }
    let d: Vec<Vector6<f64>> = (n - 3..n).map(|i| history[i].0 - history[i - 1].0).collect();
    let angle = |a: &Vector6<f64>, b: &Vector6<f64>| {
        let c = a.dot(b) / (a.norm() * b.norm());
        c.clamp(-1.0, 1.0).acos().to_degrees()
    };
    if !(angle(&d[2], &d[1]) < MAX_ANGLE && angle(&d[1], &d[0]) < MAX_ANGLE) {
        return None;
    }
    let (l2, l1) = (d[2].norm(), d[1].norm());
    let (v, e) = (
        [-(l2 + l1), -l2, 0.0],
        [history[n - 3].1, history[n - 2].1, history[n - 1].1],
    );
    let vmax = 25.0 * l2;
    // Least-squares line and interpolating parabola through (v, e).
    let vm = v.iter().sum::<f64>() / 3.0;
    let em = e.iter().sum::<f64>() / 3.0;
    let sxx: f64 = v.iter().map(|x| (x - vm).powi(2)).sum();
    let sxy: f64 = v.iter().zip(&e).map(|(x, y)| (x - vm) * (y - em)).sum();
    let slope = sxy / sxx;
    let v_lin = if slope < 0.0 { (em - slope * vm) / -slope } else { f64::INFINITY };
    let a = ((e[2] - e[1]) / (v[2] - v[1]) - (e[1] - e[0]) / (v[1] - v[0])) / (v[2] - v[0]);
    let b = (e[2] - e[1]) / (v[2] - v[1]) - a * (v[2] + v[1]);
    let v_par = if a > 0.0 { -b / (2.0 * a) } else { f64::INFINITY };
    let pick = if v_par > 0.0 && v_par < v_lin.min(vmax) {
        v_par
    } else if v_lin > 0.0 && v_lin < vmax {
        v_lin
    } else if v_lin >= vmax && v_par >= vmax {
        vmax
    } else {
        return None;
    };
    (pick > 0.0 && pick.is_finite()).then_some(pick)
}
