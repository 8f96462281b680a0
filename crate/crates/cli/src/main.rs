use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use osop::benchmark::{
    build_databases, run_benchmark, template_count_series, write_outputs, write_series_csv, Ablation, BenchmarkConfig,
};
use osop::features::LocalStatsExtractor;
use osop::geometry::mesh_io::load_mesh;
use osop::image::{read_color_png, read_depth_png, write_color_png, write_depth_png, write_mask_png};
use osop::metrics::{aggregate_recall, RecallThresholds};
use osop::pipeline::{detect, DetectConfig, Injection, Mode, Observation};
use osop::scene::{render_spec, resolve_mesh, MeshLibrary, SuiteConfig, SuiteFile};
use osop::template_db::{build_database, DatabaseConfig, TemplateDatabase, ViewpointGrid};
use osop::CameraIntrinsics;

#[derive(Parser)]
#[command(name = "osop", version, about = "One-shot 6-DoF object pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a template database for one mesh.
    RenderTemplates(RenderTemplatesArgs),
    /// Estimate the pose of a database object in one image.
    Detect(DetectArgs),
    /// Aggregate recall over a records CSV.
    Evaluate(EvaluateArgs),
    /// Run the pipeline over a scene suite and write results.
    Benchmark(BenchmarkArgs),
    /// Render the scenes of a suite to PNGs with ground truth.
    RenderScenes(RenderScenesArgs),
}

#[derive(Args)]
struct CameraArgs {
    /// Camera intrinsics JSON ({fx, fy, cx, cy, width, height}).
    #[arg(long)]
    camera: Option<PathBuf>,
}

impl CameraArgs {
    fn load(&self) -> Result<Option<CameraIntrinsics>> {
        self.camera.as_deref().map(read_json).transpose()
    }
}

#[derive(Args)]
struct RenderTemplatesArgs {
    /// PLY/OBJ file or built-in mesh id (box, prism, lblock, octa, wedge, ...).
    #[arg(long)]
    mesh: String,
    /// Database root; the object directory is created inside it.
    #[arg(long)]
    out: PathBuf,
    /// Object id; defaults to the mesh file stem.
    #[arg(long)]
    id: Option<String>,
    /// Azimuth × elevation × in-plane counts.
    #[arg(long, default_value = "16x8x4")]
    grid: String,
    #[arg(long, default_value_t = 2.5)]
    radius_scale: f64,
    #[arg(long, default_value_t = 64)]
    template_size: usize,
    #[command(flatten)]
    camera: CameraArgs,
}

#[derive(Args)]
struct DetectArgs {
    /// Object directory written by render-templates.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// 16-bit depth PNG; enables depth mode.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// mm per depth unit; overrides the PNG sidecar.
    #[arg(long)]
    depth_scale: Option<f64>,
    #[arg(long)]
    multi_hyp: bool,
    #[arg(long)]
    icp: bool,
    /// DetectConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the predicted mask here.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    camera: CameraArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    records: PathBuf,
    /// RecallThresholds JSON.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rgb,
    Depth,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Predicted,
    GtMask,
    GtMaskClosestTemplate,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Suite JSON: generator settings or explicit scene specs. Defaults to
    /// the built-in 100-scene suite.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    multi_hyp: bool,
    #[arg(long)]
    icp: bool,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// BenchmarkConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "16x8x4")]
    grid: String,
    #[arg(long, default_value_t = 64)]
    template_size: usize,
    /// Also sweep these template counts (subset of 8, 32, 128, 512) and
    /// write template_count.csv.
    #[arg(long, value_delimiter = ',')]
    template_counts: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderScenesArgs {
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Render only the first N scenes.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    depth_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_suite(path: Option<&Path>) -> Result<SuiteFile> {
    match path {
        Some(p) => read_json(p),
        None => Ok(SuiteFile::Generated(SuiteConfig::default())),
    }
}

fn render_templates(a: RenderTemplatesArgs) -> Result<()> {
    let mesh = resolve_mesh(&a.mesh).or_else(|_| load_mesh(Path::new(&a.mesh)))?;
    let id = a.id.unwrap_or_else(|| {
        Path::new(&a.mesh)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| a.mesh.clone())
    });
    let camera = match a.camera.load()? {
        Some(k) => k,
        None => SuiteConfig::default().camera()?,
    };
    let cfg = DatabaseConfig {
        grid: ViewpointGrid::parse_dims(&a.grid)?,
        radius_scale: a.radius_scale,
        template_size: a.template_size,
        ..Default::default()
    };
    let extractor = LocalStatsExtractor::default();
    let db = build_database(&mesh, &id, &cfg, &camera, &extractor)?;
    let dir = db.save(&a.out)?;
    info!("{} templates written to {}", db.len(), dir.display());
    println!("{}", dir.display());
    Ok(())
}

fn run_detect(a: DetectArgs) -> Result<()> {
    let extractor = LocalStatsExtractor::default();
    let db = TemplateDatabase::load(&a.db, &extractor)?;
    let camera = a.camera.load()?.unwrap_or(db.camera);
    let mut cfg: DetectConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DetectConfig::default(),
    };
    cfg.mode = if a.depth.is_some() { Mode::Depth } else { Mode::Rgb };
    cfg.multi_hypothesis |= a.multi_hyp;
    cfg.icp |= a.icp;
    let image = read_color_png(&a.image)?;
    let depth = a.depth.as_deref().map(|p| read_depth_png(p, a.depth_scale)).transpose()?;
    if image.width() != camera.width || image.height() != camera.height {
        bail!(
            "image is {}x{} but the camera is {}x{}",
            image.width(),
            image.height(),
            camera.width,
            camera.height
        );
    }
    let obs = Observation {
        image: &image,
        depth: depth.as_ref(),
        camera: &camera,
    };
    let det = detect(&obs, &db, &extractor, &cfg, &Injection::default())?;
    info!(
        "template {:?}, {} inliers, {} hypotheses, {:.1} ms",
        det.template,
        det.estimate.inliers,
        det.hypotheses.len(),
        det.times.total()
    );
    write_json(&a.out, &det.estimate.pose)?;
    if let Some(p) = &a.mask_out {
        write_mask_png(&det.mask, p)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let records = osop::benchmark::read_records_csv(&a.records)?;
    let th: RecallThresholds = match &a.thresholds {
        Some(p) => read_json(p)?,
        None => RecallThresholds::default(),
    };
    let summary = aggregate_recall(&records, &th);
    if let Some(w) = &summary.warning {
        log::warn!("{w}");
    }
    println!(
        "{} records: ADD10 {:.3}, AR2 {:.3} (MSSD {:.3}, MSPD {:.3})",
        summary.records, summary.add10, summary.ar2, summary.mssd_recall, summary.mspd_recall
    );
    write_json(&a.out, &summary)
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.detect.mode = match m {
            ModeArg::Rgb => Mode::Rgb,
            ModeArg::Depth => Mode::Depth,
        };
    }
    cfg.detect.multi_hypothesis |= a.multi_hyp;
    cfg.detect.icp |= a.icp;
    if let Some(ab) = a.ablation {
        cfg.ablation = match ab {
            AblationArg::Predicted => Ablation::Predicted,
            AblationArg::GtMask => Ablation::GtMask,
            AblationArg::GtMaskClosestTemplate => Ablation::GtMaskClosestTemplate,
        };
    }
    let suite = load_suite(a.suite.as_deref())?;
    let mut meshes = MeshLibrary::new();
    let specs = suite.specs(&mut meshes)?;
    let Some(camera) = specs.first().map(|s| s.camera) else {
        bail!("suite has no scenes");
    };
    if specs.iter().any(|s| s.camera != camera) {
        bail!("all scenes of a suite must share one camera");
    }
    let db_config = DatabaseConfig {
        grid: ViewpointGrid::parse_dims(&a.grid)?,
        template_size: a.template_size,
        ..Default::default()
    };
    let extractor = LocalStatsExtractor::default();
    info!("building databases for {} scenes", specs.len());
    let dbs: BTreeMap<_, _> = build_databases(&specs, &meshes, &db_config, &camera, &extractor)?;
    let result = run_benchmark(&specs, &meshes, &dbs, &extractor, &cfg)?;
    write_outputs(&a.out, &cfg, &result)?;
    let s = &result.summary;
    println!(
        "{} scenes, {} failures: ADD10 {:.3}, AR2 {:.3}",
        s.records, s.failures, s.add10, s.ar2
    );
    if !a.template_counts.is_empty() {
        let series = template_count_series(&specs, &meshes, &a.template_counts, &db_config, &camera, &extractor, &cfg)?;
        for p in &series {
            println!("{:4} templates: ADD10 {:.3}", p.templates, p.add10);
        }
        write_series_csv(&a.out.join("template_count.csv"), &series)?;
    }
    Ok(())
}

fn render_scenes(a: RenderScenesArgs) -> Result<()> {
    let suite = load_suite(a.suite.as_deref())?;
    let mut meshes = MeshLibrary::new();
    let mut specs = suite.specs(&mut meshes)?;
    if let Some(n) = a.limit {
        specs.truncate(n);
    }
    for spec in &specs {
        let scene = render_spec(spec, &meshes)?;
        let dir = a.out.join(format!("{:06}_{:06}", spec.scene_id, spec.im_id));
        fs::create_dir_all(&dir)?;
        write_color_png(&scene.color, &dir.join("rgb.png"))?;
        write_depth_png(&scene.depth, a.depth_scale, &dir.join("depth.png"), true)?;
        write_mask_png(&scene.mask, &dir.join("mask.png"))?;
        write_json(&dir.join("camera.json"), &spec.camera)?;
        write_json(&dir.join("spec.json"), spec)?;
    }
    println!("{} scenes written to {}", specs.len(), a.out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("OSOP_THREADS") {
        let n: usize = v.parse().with_context(|| format!("OSOP_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::RenderTemplates(a) => render_templates(a),
        Command::Detect(a) => run_detect(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::RenderScenes(a) => render_scenes(a),
    }
}
