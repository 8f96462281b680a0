//! Pose error metrics: ADD, MSSD, MSPD and two-metric average recall.

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Mesh, Pose};

/// Default ADD threshold as a fraction of the diameter.
pub const ADD_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddScore {
    /// Mean vertex displacement, mm.
    pub error: f64,
    pub correct: bool,
}

/// Mean distance between model vertices under the two poses.
pub fn add_score(est: &Pose, gt: &Pose, mesh: &Mesh, tau_fraction: f64) -> AddScore {
    let v = mesh.vertices();
    let error = v.iter().map(|p| (est.apply(p) - gt.apply(p)).norm()).sum::<f64>() / v.len() as f64;
    AddScore {
        error,
        correct: error < tau_fraction * mesh.diameter(),
    }
}

/// Maximum symmetry-aware surface and projection distances. `symmetries` are
/// model-frame transforms and must contain the identity.
pub fn mssd_mspd(est: &Pose, gt: &Pose, mesh: &Mesh, k: &CameraIntrinsics, symmetries: &[Pose]) -> (f64, f64) {
    let identity = [Pose::identity()];
    let syms = if symmetries.is_empty() { &identity[..] } else { symmetries };
    let v = mesh.vertices();
    let est_cam: Vec<_> = v.iter().map(|p| est.apply(p)).collect();
    let est_px: Vec<_> = est_cam.iter().map(|x| project(k, x)).collect();
    let mut mssd = f64::INFINITY;
    let mut mspd = f64::INFINITY;
    for s in syms {
        let g = gt.compose(s);
        let mut d3 = 0.0f64;
        let mut d2 = 0.0f64;
        for (i, p) in v.iter().enumerate() {
            let x = g.apply(p);
            d3 = d3.max((est_cam[i] - x).norm());
            d2 = d2.max(match (est_px[i], project(k, &x)) {
                (Some(a), Some(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
                _ => f64::INFINITY,
            });
        }
        mssd = mssd.min(d3);
        mspd = mspd.min(d2);
    }
    (mssd, mspd)
}

fn project(k: &CameraIntrinsics, x: &nalgebra::Vector3<f64>) -> Option<(f64, f64)> {
    (x.z > 0.0).then(|| (k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy))
}

/// Per-stage wall-clock times, ms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub segmentation: f64,
    pub matching: f64,
    pub correspondence: f64,
    pub solver: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.segmentation + self.matching + self.correspondence + self.solver
    }
}

/// Evaluation of one estimate. Failed detections carry infinite errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub scene_id: usize,
    pub im_id: usize,
    pub obj_id: String,
    pub estimate: Option<Pose>,
    pub gt: Pose,
    pub diameter: f64,
    /// Diagonal of the evaluated image, px.
    pub image_diagonal: f64,
    pub add: f64,
    pub mssd: f64,
    pub mspd: f64,
    /// Verification or solver score of the estimate.
    pub score: f64,
    pub times: StageTimes,
    pub error: Option<String>,
}

impl EvalRecord {
    /// Evaluates `estimate` against `gt`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        scene_id: usize,
        im_id: usize,
        obj_id: &str,
        estimate: Option<Pose>,
        gt: Pose,
        mesh: &Mesh,
        k: &CameraIntrinsics,
        symmetries: &[Pose],
    ) -> Self {
        let (add, mssd, mspd) = match &estimate {
            Some(e) => {
                let (s, p) = mssd_mspd(e, &gt, mesh, k, symmetries);
                (add_score(e, &gt, mesh, ADD_THRESHOLD).error, s, p)
            }
            None => (f64::INFINITY, f64::INFINITY, f64::INFINITY),
        };
        Self {
            scene_id,
            im_id,
            obj_id: obj_id.to_string(),
            estimate,
            gt,
            diameter: mesh.diameter(),
            image_diagonal: k.diagonal(),
            add,
            mssd,
            mspd,
            score: 0.0,
            times: StageTimes::default(),
            error: None,
        }
    }

    pub fn add_correct(&self, tau_fraction: f64) -> bool {
        self.add < tau_fraction * self.diameter
    }
}

/// Threshold grids for [`aggregate_recall`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallThresholds {
    /// Fractions of the diameter.
    pub mssd: Vec<f64>,
    /// Pixels at the reference diagonal.
    pub mspd: Vec<f64>,
    /// Image diagonal the MSPD thresholds refer to.
    pub reference_diagonal: f64,
    pub add: f64,
}

impl Default for RecallThresholds {
    fn default() -> Self {
        Self {
            mssd: (1..=10).map(|i| 0.05 * i as f64).collect(),
            mspd: (1..=10).map(|i| 5.0 * i as f64).collect(),
            // 640×480
            reference_diagonal: 800.0,
            add: ADD_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub records: usize,
    pub failures: usize,
    pub mssd_recall: f64,
    pub mspd_recall: f64,
    /// Mean of the MSSD and MSPD recalls (VSD excluded).
    pub ar2: f64,
    pub add10: f64,
    pub mean_add: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Recall over the threshold grids, averaged per metric.
pub fn aggregate_recall(records: &[EvalRecord], th: &RecallThresholds) -> RecallSummary {
    if records.is_empty() {
        return RecallSummary {
            records: 0,
            failures: 0,
            mssd_recall: 0.0,
            mspd_recall: 0.0,
            ar2: 0.0,
            add10: 0.0,
            mean_add: None,
            warning: Some("no records; recall defined as 0".into()),
        };
    }
    let n = records.len() as f64;
    let recall = |grid: &[f64], pass: &dyn Fn(&EvalRecord, f64) -> bool| {
        if grid.is_empty() {
            return 0.0;
        }
        grid.iter()
            .map(|&t| records.iter().filter(|r| pass(r, t)).count() as f64 / n)
            .sum::<f64>()
            / grid.len() as f64
    };
    let mssd_recall = recall(&th.mssd, &|r, t| r.mssd < t * r.diameter);
    let mspd_recall = recall(&th.mspd, &|r, t| r.mspd < t * r.image_diagonal / th.reference_diagonal);
    let finite: Vec<f64> = records.iter().map(|r| r.add).filter(|a| a.is_finite()).collect();
    RecallSummary {
        records: records.len(),
        failures: records.iter().filter(|r| r.estimate.is_none()).count(),
        mssd_recall,
        mspd_recall,
        ar2: 0.5 * (mssd_recall + mspd_recall),
        add10: records.iter().filter(|r| r.add_correct(th.add)).count() as f64 / n,
        mean_add: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        warning: None,
    }
}
