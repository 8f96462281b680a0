use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kabsch::kabsch;
use super::pnp::{pnp, refine_reprojection, reprojection_error};
use crate::correspondence::Match2d3d;
use crate::error::{OsopError, Result};
use crate::geometry::{CameraIntrinsics, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Pnp,
    Kabsch,
}

impl Solver {
    pub fn minimal_sample(self) -> usize {
        match self {
            Solver::Pnp => 4,
            Solver::Kabsch => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    None,
    Icp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Pixels for PnP, millimeters for Kabsch.
    pub threshold: f64,
    /// Early-exit confidence in (0, 1).
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            threshold: 3.0,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.threshold > 0.0) || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(OsopError::InvalidConfig(format!("bad RANSAC config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inliers: usize,
    /// Mean residual over inliers (px or mm).
    pub residual: f64,
    pub solver: Solver,
    pub refinement: Refinement,
    #[serde(skip)]
    pub inlier_mask: Vec<bool>,
}

/// Model-frame ↔ camera-frame point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match3d3d {
    pub model: Vector3<f64>,
    pub camera: Vector3<f64>,
}

/// Matches for one of the two solver families.
#[derive(Debug, Clone, Copy)]
pub enum Matches<'a> {
    Points2d(&'a [Match2d3d], &'a CameraIntrinsics),
    Points3d(&'a [Match3d3d]),
}

impl Matches<'_> {
    fn len(&self) -> usize {
        match self {
            Matches::Points2d(m, _) => m.len(),
            Matches::Points3d(m) => m.len(),
        }
    }

    fn solver(&self) -> Solver {
        match self {
            Matches::Points2d(..) => Solver::Pnp,
            Matches::Points3d(_) => Solver::Kabsch,
        }
    }

    fn fit(&self, idx: &[usize]) -> Result<Pose> {
        match self {
            Matches::Points2d(m, k) => {
                let sub: Vec<Match2d3d> = idx.iter().map(|&i| m[i]).collect();
                pnp(&sub, k)
            }
            Matches::Points3d(m) => {
                let src: Vec<_> = idx.iter().map(|&i| m[i].model).collect();
                let dst: Vec<_> = idx.iter().map(|&i| m[i].camera).collect();
                kabsch(&src, &dst)
            }
        }
    }

    fn residual(&self, pose: &Pose, i: usize) -> f64 {
        match self {
            Matches::Points2d(m, k) => reprojection_error(pose, &m[i], k),
            Matches::Points3d(m) => (m[i].camera - pose.apply(&m[i].model)).norm(),
        }
    }
}

struct Scored {
    pose: Pose,
    inliers: usize,
    residual_sum: f64,
}

fn score(matches: &Matches, pose: Pose, threshold: f64) -> Scored {
    let mut inliers = 0;
    let mut residual_sum = 0.0;
    for i in 0..matches.len() {
        let r = matches.residual(&pose, i);
        if r < threshold {
            inliers += 1;
            residual_sum += r;
        }
    }
    Scored {
        pose,
        inliers,
        residual_sum,
    }
}

fn better(a: &Scored, b: &Option<Scored>) -> bool {
    match b {
        None => true,
        Some(b) => a.inliers > b.inliers || (a.inliers == b.inliers && a.residual_sum < b.residual_sum),
    }
}

/// Seeded RANSAC over minimal samples with a final re-fit on the inliers.
pub fn ransac(matches: Matches<'_>, cfg: &RansacConfig) -> Result<PoseEstimate> {
    cfg.validate()?;
    let s = matches.solver().minimal_sample();
    let n = matches.len();
    if n < s {
        return Err(OsopError::NotEnoughMatches { needed: s, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Scored> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    while it < needed.min(cfg.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, s).into_vec();
        let Ok(pose) = matches.fit(&idx) else {
            continue;
        };
        let sc = score(&matches, pose, cfg.threshold);
        if better(&sc, &best) {
            let w = sc.inliers as f64 / n as f64;
            let p_fail = 1.0 - w.powi(s as i32);
            needed = if p_fail <= 0.0 {
                0
            } else if p_fail >= 1.0 {
                cfg.max_iterations
            } else {
                ((1.0 - cfg.confidence).ln() / p_fail.ln()).ceil().max(1.0) as usize
            };
            best = Some(sc);
        }
    }
    let best = best.ok_or(OsopError::NoConsensus { best: 0, needed: s + 1 })?;
    if best.inliers < s + 1 {
        return Err(OsopError::NoConsensus {
            best: best.inliers,
            needed: s + 1,
        });
    }
    // Local optimization: re-fit on the inliers while that does not lose support.
    let mut current = best;
    for _ in 0..3 {
        let idx: Vec<usize> = (0..n).filter(|&i| matches.residual(&current.pose, i) < cfg.threshold).collect();
        let refit = match &matches {
            Matches::Points2d(m, k) => {
                let sub: Vec<Match2d3d> = idx.iter().map(|&i| m[i]).collect();
                Ok(refine_reprojection(&current.pose, &sub, k, 50))
            }
            Matches::Points3d(_) => matches.fit(&idx),
        };
        let Ok(pose) = refit else { break };
        let sc = score(&matches, pose, cfg.threshold);
        if sc.inliers < current.inliers || (sc.inliers == current.inliers && sc.residual_sum >= current.residual_sum) {
            break;
        }
        current = sc;
    }
    let inlier_mask: Vec<bool> = (0..n).map(|i| matches.residual(&current.pose, i) < cfg.threshold).collect();
    Ok(PoseEstimate {
        pose: current.pose,
        inliers: current.inliers,
        residual: current.residual_sum / current.inliers.max(1) as f64,
        solver: matches.solver(),
        refinement: Refinement::None,
        inlier_mask,
    })
}
