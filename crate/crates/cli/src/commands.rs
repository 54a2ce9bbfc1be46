use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use headgrow::eval::{
    ablate_photo_count, ablation_csv, depth_rmse, normal_angular_error, normalized_albedo, reprojection_error,
    seam_discontinuity, state_seams, view_coverage, AlbedoSource, EvalReport, LightingMode, SeamReport,
};
use headgrow::geometry::{nominal_pose, Pose};
use headgrow::grow::{run_pipeline, ClusterStats, GrowState, PoseEstimate};
use headgrow::hgf::FloatImage;
use headgrow::ingest::{assign_cluster, collection_from_manifest, ClusterSet};
use headgrow::integrate::DepthMap;
use headgrow::manifest::{resolve, Manifest};
use headgrow::photometric::NormalField;
use headgrow::synth::{head_scene, make_dataset, mesh_scene, pose_tag};
use headgrow::{Error, Grid, HeadMesh, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Wall-clock seconds per stage; kept apart from the deterministic outputs.
#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub threads: usize,
    pub stages: BTreeMap<String, f64>,
}

impl Timings {
    fn new() -> Self {
        Self {
            threads: rayon::current_num_threads(),
            stages: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.stages.insert(stage.to_string(), t.elapsed().as_secs_f64());
        out
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Render a synthetic dataset. Returns the manifest path.
pub fn synth(config: &RunConfig, mesh: Option<&Path>) -> Result<PathBuf> {
    config.validate()?;
    let out = config.output()?;
    std::fs::create_dir_all(out)?;
    let mut timings = Timings::new();
    let scene = match mesh {
        Some(path) => mesh_scene(&HeadMesh::load(path)?, &config.synth)?,
        None => head_scene(&config.synth)?,
    };
    let manifest = timings.time("render", || make_dataset(&scene, out))?;
    std::fs::write(out.join("config.json"), config.to_json()? + "\n")?;
    timings.save(&out.join("timings.json"))?;
    Ok(manifest)
}

/// Per-cluster record of a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub pose: PoseEstimate,
    pub ambiguity: [[f64; 4]; 4],
    pub stats: ClusterStats,
}

/// Machine-readable state of a run, enough to re-score it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateFile {
    pub completed: Vec<i32>,
    pub clusters: BTreeMap<i32, ClusterRecord>,
}

impl StateFile {
    fn from_state(state: &GrowState) -> Self {
        let clusters = state
            .clusters
            .iter()
            .map(|(&k, r)| {
                let m = r.ambiguity.matrix;
                let record = ClusterRecord {
                    pose: r.pose.clone(),
                    ambiguity: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])),
                    stats: r.stats.clone(),
                };
                (k, record)
            })
            .collect();
        Self {
            completed: state.completed.clone(),
            clusters,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Serialize)]
struct MeshSummary {
    vertices: usize,
    faces: usize,
    provenance: BTreeMap<i32, usize>,
}

#[derive(Debug, Serialize)]
struct RunLog<'a> {
    config: &'a RunConfig,
    photo_counts: BTreeMap<i32, usize>,
    completed: &'a [i32],
    clusters: BTreeMap<i32, &'a ClusterStats>,
    mesh: MeshSummary,
    seams: SeamReport,
}

fn cluster_file(dir: &Path, cluster: i32, what: &str) -> PathBuf {
    dir.join("clusters").join(format!("{}_{what}", pose_tag(cluster as f64)))
}

pub fn load_dataset(config: &RunConfig) -> Result<(Manifest, PathBuf, ClusterSet)> {
    let path = config.dataset()?;
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let clusters = collection_from_manifest(&manifest, &base)?;
    Ok((manifest, base, clusters))
}

/// Run the growing pipeline and write mesh, dumps, state and logs.
pub fn reconstruct(config: &RunConfig) -> Result<GrowState> {
    config.validate()?;
    let out = config.output()?.to_path_buf();
    let mut timings = Timings::new();
    let (_, _, clusters) = timings.time("load", || load_dataset(config))?;
    let state = timings.time("pipeline", || run_pipeline(&clusters, &config.pipeline, config.clusters.as_deref()))?;
    std::fs::create_dir_all(out.join("clusters"))?;
    state.mesh.save_ply(out.join("mesh.ply"))?;
    state.mesh.save_obj(out.join("mesh.obj"))?;
    for (&k, r) in &state.clusters {
        r.depth.to_hgf().save(cluster_file(&out, k, "depth.hgf"))?;
        r.normals.save_hgf(cluster_file(&out, k, "normals.hgf"))?;
        let (w, h) = r.normals.dims();
        FloatImage::from_fn::<1>(w, h, |x, y| r.normals.valid.get(x, y).then(|| [*r.normals.albedo.get(x, y)]))
            .save(cluster_file(&out, k, "albedo.hgf"))?;
        std::fs::write(cluster_file(&out, k, "lighting.csv"), r.lighting.to_csv())?;
        if let Some(b) = &r.blend {
            FloatImage::from_fn::<1>(w, h, |x, y| Some([*b.get(x, y)])).save(cluster_file(&out, k, "blend.hgf"))?;
        }
    }
    write_json(&out.join("state.json"), &StateFile::from_state(&state))?;
    let log = RunLog {
        config,
        photo_counts: clusters.counts(),
        completed: &state.completed,
        clusters: state.clusters.iter().map(|(&k, r)| (k, &r.stats)).collect(),
        mesh: MeshSummary {
            vertices: state.mesh.vertices.len(),
            faces: state.mesh.faces.len(),
            provenance: state.mesh.provenance_histogram(),
        },
        seams: state_seams(&state),
    };
    write_json(&out.join("run_log.json"), &log)?;
    timings.save(&out.join("timings.json"))?;
    Ok(state)
}

/// A reconstruction read back from a reconstruct output directory.
pub struct RunArtifacts {
    pub mesh: HeadMesh,
    pub state: StateFile,
    pub poses: BTreeMap<i32, Pose>,
    pub albedo: BTreeMap<i32, Grid<Option<f64>>>,
    pub depths: BTreeMap<i32, DepthMap>,
    pub normals: BTreeMap<i32, NormalField>,
}

pub fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let mesh = HeadMesh::load(dir.join("mesh.ply"))?;
    let state = StateFile::load(&dir.join("state.json"))?;
    let mut out = RunArtifacts {
        mesh,
        poses: BTreeMap::new(),
        albedo: BTreeMap::new(),
        depths: BTreeMap::new(),
        normals: BTreeMap::new(),
        state,
    };
    for (&k, rec) in &out.state.clusters {
        let pose = rec.pose.pose;
        out.poses.insert(k, pose);
        let mut depth = DepthMap::from_hgf(&FloatImage::load(cluster_file(dir, k, "depth.hgf"))?)?;
        depth.camera_to_world = pose.inverse();
        out.depths.insert(k, depth);
        let mut normals = NormalField::load_hgf(cluster_file(dir, k, "normals.hgf"))?;
        let albedo = FloatImage::load(cluster_file(dir, k, "albedo.hgf"))?.to_grid::<1>()?;
        for (i, a) in albedo.iter().enumerate() {
            normals.albedo.as_mut_slice()[i] = a.map_or(0.0, |[a]| a);
        }
        out.albedo.insert(k, normalized_albedo(&normals));
        out.normals.insert(k, normals);
    }
    Ok(out)
}

/// What `eval` scores.
pub enum EvalTarget<'a> {
    /// A reconstruct output directory.
    Run(&'a Path),
    /// A bare mesh in the dataset's world frame, seen at the nominal poses.
    Mesh { path: &'a Path, albedo: Option<f64> },
}

/// Ground truth of the frontal view, when the dataset carries it.
fn frontal_truth(manifest: &Manifest, base: &Path) -> Result<Option<(NormalField, DepthMap)>> {
    let Some(entry) = manifest
        .photos
        .iter()
        .find(|p| assign_cluster(p.azimuth) == 0 && p.gt_normals.is_some() && p.gt_depth.is_some())
    else {
        return Ok(None);
    };
    let normals = NormalField::load_hgf(resolve(base, entry.gt_normals.as_deref().unwrap()))?;
    let depth = DepthMap::from_hgf(&FloatImage::load(resolve(base, entry.gt_depth.as_deref().unwrap()))?)?;
    Ok(Some((normals, depth)))
}

/// Score a reconstruction (or any mesh) against the dataset's photos and,
/// where available, its ground truth. Writes `eval.json` and `per_photo.csv`.
pub fn eval(config: &RunConfig, target: &EvalTarget, mode: LightingMode) -> Result<EvalReport> {
    config.validate()?;
    let (manifest, base, clusters) = load_dataset(config)?;
    let out = match (&config.output, target) {
        (Some(o), _) => o.clone(),
        (None, EvalTarget::Run(dir)) => dir.to_path_buf(),
        (None, _) => return Err(Error::InvalidConfig("no output directory given (--out)".into())),
    };
    std::fs::create_dir_all(&out)?;
    let mut timings = Timings::new();
    let run = match target {
        EvalTarget::Run(dir) => Some(load_run(dir)?),
        EvalTarget::Mesh { .. } => None,
    };
    let (mesh, poses, albedo) = match (target, &run) {
        (EvalTarget::Run(_), Some(run)) => (run.mesh.clone(), run.poses.clone(), AlbedoSource::Clusters(run.albedo.clone())),
        (EvalTarget::Mesh { path, albedo }, _) => {
            let mesh = HeadMesh::load(path)?;
            let poses = clusters.clusters.keys().map(|&k| (k, nominal_pose(k as f64))).collect();
            let a = albedo
                .or(manifest.ground_truth.as_ref().map(|g| g.albedo))
                .unwrap_or(1.0);
            (mesh, poses, AlbedoSource::Constant(a))
        }
        _ => unreachable!("run artifacts are loaded for run targets"),
    };
    let r = timings.time("reprojection", || reprojection_error(&mesh, &albedo, &clusters, &poses, mode))?;
    let mut report = EvalReport::from_reprojection(r, mode, clusters.counts());
    if let (Some(run), Some((gt_normals, gt_depth))) = (&run, frontal_truth(&manifest, &base)?) {
        if let (Some(n), Some(d)) = (run.normals.get(&0), run.depths.get(&0)) {
            report.angular = Some(normal_angular_error(n, &gt_normals)?);
            report.depth = Some(depth_rmse(d, &gt_depth)?);
        }
    }
    if let Some(gt) = &manifest.ground_truth {
        let gt_mesh = HeadMesh::load(resolve(&base, &gt.mesh_file))?;
        let dims = clusters.get(0)?.dims();
        report.coverage = Some(timings.time("coverage", || view_coverage(&gt_mesh, &mesh, &poses, dims))?);
    }
    if let Some(run) = &run {
        report.seams = Some(seam_discontinuity(&run.mesh, &run.state.completed, &run.depths));
    }
    write_json(&out.join("eval.json"), &report)?;
    std::fs::write(out.join("per_photo.csv"), report.per_photo_csv())?;
    timings.save(&out.join("eval_timings.json"))?;
    Ok(report)
}

/// Photo-count ablation over the configured fractions. Writes
/// `ablation.csv` and `ablation.json`.
pub fn ablate(config: &RunConfig) -> Result<Vec<headgrow::eval::AblationRow>> {
    config.validate()?;
    let out = config.output()?;
    std::fs::create_dir_all(out)?;
    let (_, _, clusters) = load_dataset(config)?;
    let rows = ablate_photo_count(&clusters, &config.fractions, config.seed, &config.pipeline);
    std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}
