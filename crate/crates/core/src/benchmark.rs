//! Synthetic benchmark: render scenes, detect, evaluate, write results.
//!
//! All CSV and JSON outputs depend only on the specs and configuration, so
//! repeated runs are byte-identical regardless of thread count. Wall-clock
//! times go to a separate `timings.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OsopError, Result};
use crate::features::FeatureExtractor;
use crate::geometry::{geodesic_angle, CameraIntrinsics, Pose, Rotation};
use crate::metrics::{add_score, aggregate_recall, EvalRecord, RecallSummary, RecallThresholds, StageTimes};
use crate::pipeline::{detect, viewing_rotation, DetectConfig, Injection, Observation};
use crate::scene::{render_spec, MeshLibrary, SceneSpec};
use crate::template_db::{build_database, nearest_templates, DatabaseConfig, TemplateDatabase};

/// Which stages are replaced by ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Everything predicted.
    Predicted,
    /// Ground-truth mask, matched template.
    GtMask,
    /// Ground-truth mask and the template closest to the ground-truth rotation.
    GtMaskClosestTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub detect: DetectConfig,
    pub ablation: Ablation,
    pub thresholds: RecallThresholds,
    /// Write per-image wall-clock time into the results CSV instead of −1.
    pub report_time: bool,
    /// Bin width of the angular-error series, degrees.
    pub angle_bin_deg: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            detect: DetectConfig::default(),
            ablation: Ablation::Predicted,
            thresholds: RecallThresholds::default(),
            report_time: false,
            angle_bin_deg: 10.0,
        }
    }
}

/// One evaluated scene plus diagnostics.
#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub record: EvalRecord,
    /// Geodesic distance between the chosen template and the ground-truth view, degrees.
    pub template_angle: Option<f64>,
    pub occlusion: f64,
    pub hypotheses: usize,
    /// Rank of the first ADD-correct hypothesis, if any.
    pub consistent_rank: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub outcomes: Vec<SceneOutcome>,
    pub summary: RecallSummary,
}

impl BenchmarkResult {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }
}

/// Runs one scene; detection failures become records without an estimate.
pub fn run_scene(
    spec: &SceneSpec,
    meshes: &MeshLibrary,
    db: &TemplateDatabase,
    extractor: &dyn FeatureExtractor,
    cfg: &BenchmarkConfig,
) -> Result<SceneOutcome> {
    let mesh = meshes.get(&spec.obj_id)?;
    let scene = render_spec(spec, meshes)?;
    let injection = match cfg.ablation {
        Ablation::Predicted => Injection::default(),
        Ablation::GtMask => Injection {
            mask: Some(scene.mask.clone()),
            template: None,
        },
        Ablation::GtMaskClosestTemplate => Injection {
            mask: Some(scene.mask.clone()),
            template: nearest_templates(db, &viewing_rotation(&spec.pose), 1).first().copied(),
        },
    };
    let obs = Observation {
        image: &scene.color,
        depth: Some(&scene.depth),
        camera: &spec.camera,
    };
    let identity = [Pose::identity()];
    let result = detect(&obs, db, extractor, &cfg.detect, &injection);
    let view = viewing_rotation(&spec.pose);
    Ok(match result {
        Ok(det) => {
            let mut record = EvalRecord::evaluate(
                spec.scene_id,
                spec.im_id,
                &spec.obj_id,
                Some(det.estimate.pose),
                spec.pose,
                mesh,
                &spec.camera,
                &identity,
            );
            let best = det.hypotheses.best();
            record.score = match best {
                Some(h) if h.verification.is_finite() => h.verification,
                _ => det.estimate.residual,
            };
            record.times = det.times;
            let consistent_rank = det
                .hypotheses
                .as_slice()
                .iter()
                .position(|h| add_score(&h.estimate.pose, &spec.pose, mesh, cfg.thresholds.add).correct);
            SceneOutcome {
                record,
                template_angle: Some(geodesic_angle(db.template(det.template).rotation(), &view)),
                occlusion: scene.occlusion,
                hypotheses: det.hypotheses.len(),
                consistent_rank,
            }
        }
        Err(e) => {
            log::warn!("scene {} im {}: {e}", spec.scene_id, spec.im_id);
            let mut record =
                EvalRecord::evaluate(spec.scene_id, spec.im_id, &spec.obj_id, None, spec.pose, mesh, &spec.camera, &identity);
            record.error = Some(e.to_string());
            SceneOutcome {
                record,
                template_angle: None,
                occlusion: scene.occlusion,
                hypotheses: 0,
                consistent_rank: None,
            }
        }
    })
}

/// Runs every scene in parallel; results keep the spec order.
pub fn run_benchmark(
    specs: &[SceneSpec],
    meshes: &MeshLibrary,
    dbs: &BTreeMap<String, TemplateDatabase>,
    extractor: &dyn FeatureExtractor,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkResult> {
    cfg.detect.validate()?;
    for s in specs {
        if !dbs.contains_key(&s.obj_id) {
            return Err(OsopError::InvalidConfig(format!("no template database for object {}", s.obj_id)));
        }
    }
    let outcomes: Vec<SceneOutcome> = specs
        .par_iter()
        .map(|s| run_scene(s, meshes, &dbs[&s.obj_id], extractor, cfg))
        .collect::<Result<_>>()?;
    let records: Vec<EvalRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let summary = aggregate_recall(&records, &cfg.thresholds);
    Ok(BenchmarkResult { outcomes, summary })
}

/// One database per object id in `specs`, all at `camera`.
pub fn build_databases(
    specs: &[SceneSpec],
    meshes: &MeshLibrary,
    config: &DatabaseConfig,
    camera: &CameraIntrinsics,
    extractor: &dyn FeatureExtractor,
) -> Result<BTreeMap<String, TemplateDatabase>> {
    let mut dbs = BTreeMap::new();
    for s in specs {
        if !dbs.contains_key(&s.obj_id) {
            let db = build_database(meshes.get(&s.obj_id)?, &s.obj_id, config, camera, extractor)?;
            dbs.insert(s.obj_id.clone(), db);
        }
    }
    Ok(dbs)
}

/// ADD10 and AR2 for each template count, using the preset grids.
pub fn template_count_series(
    specs: &[SceneSpec],
    meshes: &MeshLibrary,
    counts: &[usize],
    db_config: &DatabaseConfig,
    camera: &CameraIntrinsics,
    extractor: &dyn FeatureExtractor,
    cfg: &BenchmarkConfig,
) -> Result<Vec<TemplateCountPoint>> {
    counts
        .iter()
        .map(|&n| {
            let grid = template_count_grid(n)?;
            let dbc = DatabaseConfig { grid, ..db_config.clone() };
            let dbs = build_databases(specs, meshes, &dbc, camera, extractor)?;
            let r = run_benchmark(specs, meshes, &dbs, extractor, cfg)?;
            Ok(TemplateCountPoint {
                templates: n,
                grid,
                add10: r.summary.add10,
                ar2: r.summary.ar2,
            })
        })
        .collect()
}

/// ADD-correct fraction over outcomes.
pub fn add10(outcomes: &[SceneOutcome], tau: f64) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.record.add_correct(tau)).count() as f64 / outcomes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateCountPoint {
    pub templates: usize,
    pub grid: [usize; 3],
    pub add10: f64,
    pub ar2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleBin {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub scenes: usize,
    pub add10: f64,
}

/// ADD10 as a function of the angle between the chosen template and the
/// ground-truth view. Failed detections are excluded.
pub fn angular_error_series(outcomes: &[SceneOutcome], bin_deg: f64, tau: f64) -> Vec<AngleBin> {
    let bins = (180.0 / bin_deg).ceil() as usize;
    let mut counts = vec![(0usize, 0usize); bins];
    for o in outcomes {
        if let Some(a) = o.template_angle {
            let b = ((a / bin_deg) as usize).min(bins - 1);
            counts[b].0 += 1;
            if o.record.add_correct(tau) {
                counts[b].1 += 1;
            }
        }
    }
    counts
        .into_iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(i, (n, c))| AngleBin {
            lo_deg: i as f64 * bin_deg,
            hi_deg: ((i + 1) as f64 * bin_deg).min(180.0),
            scenes: n,
            add10: c as f64 / n as f64,
        })
        .collect()
}

/// Grids used for the template-count series.
pub fn template_count_grid(count: usize) -> Result<[usize; 3]> {
    match count {
        8 => Ok([2, 2, 2]),
        32 => Ok([4, 2, 4]),
        128 => Ok([8, 4, 4]),
        512 => Ok([16, 8, 4]),
        n => Err(OsopError::InvalidConfig(format!("no grid preset for {n} templates"))),
    }
}

fn pose_string(p: &Option<Pose>) -> String {
    match p {
        None => String::new(),
        Some(p) => p
            .rotation
            .to_row_major()
            .iter()
            .chain(p.translation.iter())
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn parse_pose(s: &str) -> Result<Option<Pose>> {
    if s.trim().is_empty() {
        return Ok(None);
    }
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|x| x.parse::<f64>().map_err(|e| OsopError::Format(format!("pose value {x:?}: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != 12 {
        return Err(OsopError::Format(format!("pose needs 12 values, got {}", v.len())));
    }
    let r: [f64; 9] = v[..9].try_into().expect("nine values");
    Ok(Some(Pose::new(
        Rotation::from_row_major(&r)?,
        nalgebra::Vector3::new(v[9], v[10], v[11]),
    )))
}

/// One row of `records.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordRow {
    scene_id: usize,
    im_id: usize,
    obj_id: String,
    add: f64,
    add_correct: bool,
    mssd: f64,
    mspd: f64,
    diameter: f64,
    image_diagonal: f64,
    score: f64,
    template_angle: Option<f64>,
    occlusion: f64,
    hypotheses: usize,
    consistent_rank: Option<usize>,
    estimate: String,
    gt: String,
    error: String,
}

pub fn write_records_csv(path: &Path, outcomes: &[SceneOutcome], tau: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in outcomes {
        let r = &o.record;
        w.serialize(RecordRow {
            scene_id: r.scene_id,
            im_id: r.im_id,
            obj_id: r.obj_id.clone(),
            add: r.add,
            add_correct: r.add_correct(tau),
            mssd: r.mssd,
            mspd: r.mspd,
            diameter: r.diameter,
            image_diagonal: r.image_diagonal,
            score: r.score,
            template_angle: o.template_angle,
            occlusion: o.occlusion,
            hypotheses: o.hypotheses,
            consistent_rank: o.consistent_rank,
            estimate: pose_string(&r.estimate),
            gt: pose_string(&Some(r.gt)),
            error: r.error.clone().unwrap_or_default(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the records written by [`write_records_csv`].
pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: RecordRow = row?;
        out.push(EvalRecord {
            scene_id: row.scene_id,
            im_id: row.im_id,
            obj_id: row.obj_id,
            estimate: parse_pose(&row.estimate)?,
            gt: parse_pose(&row.gt)?.ok_or_else(|| OsopError::Format("missing ground-truth pose".into()))?,
            diameter: row.diameter,
            image_diagonal: row.image_diagonal,
            add: row.add,
            mssd: row.mssd,
            mspd: row.mspd,
            score: row.score,
            times: StageTimes::default(),
            error: (!row.error.is_empty()).then_some(row.error),
        });
    }
    Ok(out)
}

/// Results in the BOP submission layout:
/// `scene_id,im_id,obj_id,score,R,t,time`. Failed detections are omitted.
pub fn write_bop_csv(path: &Path, records: &[EvalRecord], report_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "im_id", "obj_id", "score", "R", "t", "time"])?;
    for r in records {
        let Some(p) = &r.estimate else { continue };
        let rot: Vec<String> = p.rotation.to_row_major().iter().map(|x| format!("{x}")).collect();
        let t: Vec<String> = p.translation.iter().map(|x| format!("{x}")).collect();
        let time = if report_time { r.times.total() / 1e3 } else { -1.0 };
        w.write_record([
            r.scene_id.to_string(),
            r.im_id.to_string(),
            r.obj_id.clone(),
            format!("{}", r.score),
            rot.join(" "),
            t.join(" "),
            format!("{time}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "im_id", "obj_id", "segmentation_ms", "matching_ms", "correspondence_ms", "solver_ms"])?;
    for r in records {
        let t = &r.times;
        w.write_record([
            r.scene_id.to_string(),
            r.im_id.to_string(),
            r.obj_id.clone(),
            format!("{:.3}", t.segmentation),
            format!("{:.3}", t.matching),
            format!("{:.3}", t.correspondence),
            format!("{:.3}", t.solver),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_series_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Summary JSON contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub config: BenchmarkConfig,
    pub recall: RecallSummary,
    /// Multi-hypothesis runs: scenes with an ADD-correct hypothesis and how
    /// many of them ranked it first.
    pub consistent_present: usize,
    pub consistent_first: usize,
}

impl BenchmarkSummary {
    pub fn new(cfg: &BenchmarkConfig, result: &BenchmarkResult) -> Self {
        let present: Vec<_> = result.outcomes.iter().filter_map(|o| o.consistent_rank).collect();
        Self {
            config: cfg.clone(),
            recall: result.summary.clone(),
            consistent_present: present.len(),
            consistent_first: present.iter().filter(|&&r| r == 0).count(),
        }
    }
}

/// Writes `results.csv`, `records.csv`, `summary.json`, `angular_error.csv`
/// and `timings.csv` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &BenchmarkConfig, result: &BenchmarkResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records = result.records();
    write_bop_csv(&dir.join("results.csv"), &records, cfg.report_time)?;
    write_records_csv(&dir.join("records.csv"), &result.outcomes, cfg.thresholds.add)?;
    let summary = BenchmarkSummary::new(cfg, result);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let series = angular_error_series(&result.outcomes, cfg.angle_bin_deg, cfg.thresholds.add);
    write_series_csv(&dir.join("angular_error.csv"), &series)?;
    write_timings_csv(&dir.join("timings.csv"), &records)?;
    Ok(())
}
