//! Scoring of reconstructions: reprojection intensity error, normal angular
//! error, depth error up to scale and offset, view coverage, seam
//! discontinuity, and the photo-count ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_degrees, camera_to_pixel, image_center, nominal_pose, Pose};
use crate::grid::Grid;
use crate::grow::{render_mesh, run_pipeline, GrowState, PipelineConfig};
use crate::ingest::{ClusterSet, Photo, CLUSTER_BINS};
use crate::integrate::DepthMap;
use crate::mesh::HeadMesh;
use crate::photometric::{median, NormalField};
use crate::synth::{quantize, shade};

/// Photo-count fractions of the ablation table.
pub const ABLATION_FRACTIONS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Alternating shadow/fit passes of the per-photo lighting fit.
pub const LIGHTING_FIT_ITERATIONS: usize = 3;

/// Albedo used when re-rendering a mesh.
#[derive(Debug, Clone)]
pub enum AlbedoSource {
    Constant(f64),
    /// Per-cluster albedo maps in the cluster frame, `None` where unknown.
    Clusters(BTreeMap<i32, Grid<Option<f64>>>),
}

impl AlbedoSource {
    /// Albedo maps of a reconstruction, each normalized by its median.
    pub fn from_state(state: &GrowState) -> Self {
        Self::Clusters(
            state
                .clusters
                .iter()
                .map(|(&k, r)| (k, normalized_albedo(&r.normals)))
                .collect(),
        )
    }
}

/// Albedo of a field divided by its median over valid pixels.
pub fn normalized_albedo(field: &NormalField) -> Grid<Option<f64>> {
    let mut values: Vec<f64> = (0..field.valid.len())
        .filter(|&i| field.valid.as_slice()[i] && field.albedo.as_slice()[i] > 0.0)
        .map(|i| field.albedo.as_slice()[i])
        .collect();
    let med = if values.is_empty() { 1.0 } else { median(&mut values) };
    let (w, h) = field.dims();
    Grid::from_fn(w, h, |x, y| {
        let a = *field.albedo.get(x, y);
        (*field.valid.get(x, y) && a > 0.0).then(|| a / med)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingMode {
    /// Refit `[ambient, direction]` per photo against the rendered normals.
    #[default]
    Fitted,
    /// Use the light recorded with each photo; albedo must be absolute.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoError {
    pub id: String,
    pub cluster: i32,
    pub rms: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reprojection {
    pub mean: f64,
    /// Population standard deviation across photos.
    pub std: f64,
    pub pixels: usize,
    pub photos: Vec<PhotoError>,
}

/// One rendered sample of the mesh in a cluster frame.
struct Sample {
    index: usize,
    normal: Vector3<f64>,
    albedo: f64,
}

/// Camera-frame smooth normals of the visible surface, where albedo is known.
fn render_samples(mesh: &HeadMesh, vertex_normals: &[Vector3<f64>], pose: &Pose, albedo: &dyn Fn(usize) -> Option<f64>, dims: (usize, usize)) -> Vec<Sample> {
    let buffer = render_mesh(mesh, pose, dims);
    let mut out = Vec::new();
    for (index, frag) in buffer.iter().enumerate() {
        let Some(f) = frag else { continue };
        let Some(a) = albedo(index) else { continue };
        let [i, j, k] = mesh.faces[f.face];
        let n = pose.rotation * f.interpolate(vertex_normals[i], vertex_normals[j], vertex_normals[k]);
        let len = n.norm();
        if len > 1e-12 {
            out.push(Sample {
                index,
                normal: n / len,
                albedo: a,
            });
        }
    }
    out
}

/// Least-squares `[ambient, l]` for `I = a (ambient + max(0, l.n))`,
/// alternating between the fit and the shadow assignment.
pub fn fit_lighting(samples: &[(f64, Vector3<f64>, f64)], iterations: usize) -> Vector4<f64> {
    let mut lit = vec![true; samples.len()];
    let mut c = Vector4::zeros();
    for _ in 0..iterations.max(1) {
        let mut ata = Matrix4::zeros();
        let mut atb = Vector4::zeros();
        for (&(i, n, a), &l) in samples.iter().zip(&lit) {
            let row = if l {
                Vector4::new(a, a * n.x, a * n.y, a * n.z)
            } else {
                Vector4::new(a, 0.0, 0.0, 0.0)
            };
            ata += row * row.transpose();
            atb += row * i;
        }
        let Some(sol) = ata.try_inverse().map(|m| m * atb) else { break };
        c = sol;
        let l = Vector3::new(c[1], c[2], c[3]);
        let changed = samples
            .iter()
            .zip(lit.iter_mut())
            .fold(false, |acc, ((_, n, _), lit)| {
                let now = l.dot(n) > 0.0;
                let flip = now != *lit;
                *lit = now;
                acc || flip
            });
        if !changed {
            break;
        }
    }
    c
}

fn predict(c: &Vector4<f64>, n: &Vector3<f64>, albedo: f64) -> f64 {
    let l = Vector3::new(c[1], c[2], c[3]);
    quantize(albedo * (c[0] + l.dot(n).max(0.0)))
}

fn photo_error(photo: &Photo, cluster: i32, samples: &[Sample], mode: LightingMode) -> Result<Option<PhotoError>> {
    let data: Vec<(f64, Vector3<f64>, f64)> = samples
        .iter()
        .filter(|s| photo.mask.as_slice()[s.index])
        .map(|s| (photo.pixels.as_slice()[s.index], s.normal, s.albedo))
        .collect();
    if data.is_empty() {
        return Ok(None);
    }
    let sq: f64 = match mode {
        LightingMode::Fitted => {
            let c = fit_lighting(&data, LIGHTING_FIT_ITERATIONS);
            data.iter().map(|(i, n, a)| (predict(&c, n, *a) - i).powi(2)).sum()
        }
        LightingMode::GroundTruth => {
            let light = photo.light.as_ref().ok_or_else(|| Error::InvalidPhoto {
                id: photo.id.clone(),
                reason: "no recorded light for ground-truth lighting".into(),
            })?;
            data.iter().map(|(i, n, a)| (quantize(shade(*a, n, light)) - i).powi(2)).sum()
        }
    };
    Ok(Some(PhotoError {
        id: photo.id.clone(),
        cluster,
        rms: (sq / data.len() as f64).sqrt(),
        pixels: data.len(),
    }))
}

/// Re-render the mesh for every photo of every posed cluster and compare
/// intensities. Per-photo RMS over pixels valid in both the photo and the
/// rendering (and the albedo map); mean and std across photos.
pub fn reprojection_error(
    mesh: &HeadMesh,
    albedo: &AlbedoSource,
    clusters: &ClusterSet,
    poses: &BTreeMap<i32, Pose>,
    mode: LightingMode,
) -> Result<Reprojection> {
    let vertex_normals = mesh.vertex_normals();
    let mut photos = Vec::new();
    for (&id, pose) in poses {
        let Some(cluster) = clusters.clusters.get(&id) else { continue };
        let dims = cluster.dims();
        let samples = match albedo {
            AlbedoSource::Constant(a) => render_samples(mesh, &vertex_normals, pose, &|_| Some(*a), dims),
            AlbedoSource::Clusters(maps) => {
                let Some(map) = maps.get(&id).filter(|m| m.dims() == dims) else { continue };
                render_samples(mesh, &vertex_normals, pose, &|i| map.as_slice()[i], dims)
            }
        };
        let errors: Vec<Option<PhotoError>> = cluster
            .photos
            .par_iter()
            .map(|p| photo_error(p, id, &samples, mode))
            .collect::<Result<_>>()?;
        photos.extend(errors.into_iter().flatten());
    }
    if photos.is_empty() {
        return Err(Error::NoValidOverlap);
    }
    let (mean, std) = mean_std(photos.iter().map(|p| p.rms));
    Ok(Reprojection {
        mean,
        std,
        pixels: photos.iter().map(|p| p.pixels).sum(),
        photos,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularError {
    pub median: f64,
    pub mean: f64,
    pub pixels: usize,
}

pub fn normal_angular_error(est: &NormalField, gt: &NormalField) -> Result<AngularError> {
    if est.dims() != gt.dims() {
        return Err(Error::NoValidOverlap);
    }
    let mut angles: Vec<f64> = (0..gt.valid.len())
        .filter(|&i| est.valid.as_slice()[i] && gt.valid.as_slice()[i])
        .map(|i| angle_degrees(&est.normals.as_slice()[i], &gt.normals.as_slice()[i]))
        .collect();
    if angles.is_empty() {
        return Err(Error::NoValidOverlap);
    }
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    let pixels = angles.len();
    Ok(AngularError {
        median: median(&mut angles),
        mean,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthFit {
    pub rmse: f64,
    pub scale: f64,
    pub offset: f64,
    pub pixels: usize,
}

/// RMSE after the closed-form fit `s * est + c ~ gt`.
pub fn depth_rmse(est: &DepthMap, gt: &DepthMap) -> Result<DepthFit> {
    if est.dims() != gt.dims() {
        return Err(Error::NoValidOverlap);
    }
    let pairs: Vec<(f64, f64)> = (0..gt.valid.len())
        .filter(|&i| est.valid.as_slice()[i] && gt.valid.as_slice()[i])
        .map(|i| (est.depth.as_slice()[i], gt.depth.as_slice()[i]))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::NoValidOverlap);
    }
    let n = pairs.len() as f64;
    let (me, mg) = pairs.iter().fold((0.0, 0.0), |(a, b), (e, g)| (a + e / n, b + g / n));
    let (mut see, mut seg) = (0.0, 0.0);
    for (e, g) in &pairs {
        see += (e - me) * (e - me);
        seg += (e - me) * (g - mg);
    }
    if !(see > 1e-20 * n * me.abs().max(1.0).powi(2)) {
        return Err(Error::DegenerateFit);
    }
    let scale = seg / see;
    let offset = mg - scale * me;
    let sq: f64 = pairs.iter().map(|(e, g)| (scale * e + offset - g).powi(2)).sum();
    Ok(DepthFit {
        rmse: (sq / n).sqrt(),
        scale,
        offset,
        pixels: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Per view: (ground-truth pixels also covered by the reconstruction,
    /// ground-truth pixels).
    pub per_view: BTreeMap<i32, (usize, usize)>,
    pub fraction: f64,
}

/// Fraction of the ground-truth silhouettes, summed over the canonical
/// views, that the reconstruction covers. Views without an estimated pose
/// use the nominal one.
pub fn view_coverage(gt: &HeadMesh, recon: &HeadMesh, poses: &BTreeMap<i32, Pose>, dims: (usize, usize)) -> Result<Coverage> {
    let mut per_view = BTreeMap::new();
    let (mut hit, mut total) = (0usize, 0usize);
    for view in CLUSTER_BINS {
        let g = render_mesh(gt, &nominal_pose(view as f64), dims);
        let pose = poses.get(&view).copied().unwrap_or_else(|| nominal_pose(view as f64));
        let r = render_mesh(recon, &pose, dims);
        let t = g.iter().filter(|f| f.is_some()).count();
        let h = g.iter().zip(r.iter()).filter(|(a, b)| a.is_some() && b.is_some()).count();
        per_view.insert(view, (h, t));
        hit += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::EmptyProjection);
    }
    Ok(Coverage {
        per_view,
        fraction: hit as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeamStats {
    pub edges: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    /// Keyed by "older->newer" cluster pair.
    pub per_seam: BTreeMap<String, SeamStats>,
    pub overall: SeamStats,
    /// Bounding-box depth of the mesh, the normalizer of `relative_mean`.
    pub depth_range: f64,
    pub relative_mean: f64,
}

/// Depth discontinuity across seams: for every mesh edge joining vertices of
/// two different views, the distance along the newer view's ray between the
/// older vertex and the newer view's depth map.
/// `depths` are the views' depth maps, whose `camera_to_world` carries the
/// view pose; `order` is the order the views were added in.
pub fn seam_discontinuity(mesh: &HeadMesh, order: &[i32], depths: &BTreeMap<i32, DepthMap>) -> SeamReport {
    let order: BTreeMap<i32, usize> = order.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut per_seam: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for (a, b) in mesh.edges() {
        let (pa, pb) = (mesh.provenance[a], mesh.provenance[b]);
        if pa == pb {
            continue;
        }
        let (Some(&oa), Some(&ob)) = (order.get(&pa), order.get(&pb)) else { continue };
        let (old, newer) = if oa < ob { (a, pb) } else { (b, pa) };
        let Some(depth) = depths.get(&newer) else { continue };
        let (w, h) = depth.dims();
        let (x, y, z) = camera_to_pixel(&(depth.camera_to_world.inverse() * mesh.vertices[old]), image_center(w, h));
        let Some(d) = depth.sample(x, y) else { continue };
        let gap = (z - d).abs();
        let key = format!("{}->{}", mesh.provenance[old], newer);
        let e = per_seam.entry(key).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += gap;
        e.2 = f64::max(e.2, gap);
    }
    let stats = |(n, sum, max): (usize, f64, f64)| SeamStats {
        edges: n,
        mean: if n > 0 { sum / n as f64 } else { 0.0 },
        max,
    };
    let total = per_seam
        .values()
        .fold((0, 0.0, 0.0), |a, e| (a.0 + e.0, a.1 + e.1, f64::max(a.2, e.2)));
    let depth_range = mesh.bounding_box().map_or(0.0, |(lo, hi)| hi.z - lo.z);
    let overall = stats(total);
    SeamReport {
        per_seam: per_seam.into_iter().map(|(k, v)| (k, stats(v))).collect(),
        relative_mean: if depth_range > 0.0 { overall.mean / depth_range } else { 0.0 },
        overall,
        depth_range,
    }
}

pub fn state_seams(state: &GrowState) -> SeamReport {
    let depths = state.clusters.iter().map(|(&k, r)| (k, r.depth.clone())).collect();
    seam_discontinuity(&state.mesh, &state.completed, &depths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEval {
    pub photos: usize,
    pub pixels: usize,
    pub reprojection_mean: f64,
    pub reprojection_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reprojection_mean: f64,
    pub reprojection_std: f64,
    pub reprojection_pixels: usize,
    pub lighting: LightingMode,
    pub angular: Option<AngularError>,
    pub depth: Option<DepthFit>,
    pub coverage: Option<Coverage>,
    pub seams: Option<SeamReport>,
    pub per_cluster: BTreeMap<i32, ClusterEval>,
    pub photo_counts: BTreeMap<i32, usize>,
    #[serde(skip)]
    pub per_photo: Vec<PhotoError>,
}

impl EvalReport {
    pub fn from_reprojection(r: Reprojection, mode: LightingMode, photo_counts: BTreeMap<i32, usize>) -> Self {
        let mut groups: BTreeMap<i32, Vec<&PhotoError>> = BTreeMap::new();
        for p in &r.photos {
            groups.entry(p.cluster).or_default().push(p);
        }
        let per_cluster = groups
            .into_iter()
            .map(|(k, ps)| {
                let (mean, std) = mean_std(ps.iter().map(|p| p.rms));
                let eval = ClusterEval {
                    photos: ps.len(),
                    pixels: ps.iter().map(|p| p.pixels).sum(),
                    reprojection_mean: mean,
                    reprojection_std: std,
                };
                (k, eval)
            })
            .collect();
        Self {
            reprojection_mean: r.mean,
            reprojection_std: r.std,
            reprojection_pixels: r.pixels,
            lighting: mode,
            angular: None,
            depth: None,
            coverage: None,
            seams: None,
            per_cluster,
            photo_counts,
            per_photo: r.photos,
        }
    }

    pub fn per_photo_csv(&self) -> String {
        let mut s = String::from("photo,cluster,rms,pixels\n");
        for p in &self.per_photo {
            let _ = writeln!(s, "{},{},{},{}", p.id, p.cluster, p.rms, p.pixels);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Poses of every completed cluster of a run.
pub fn state_poses(state: &GrowState) -> BTreeMap<i32, Pose> {
    state.clusters.iter().map(|(&k, r)| (k, r.pose.pose)).collect()
}

/// Reprojection scores of a finished run against its own photos, with
/// seam statistics.
pub fn evaluate_state(state: &GrowState, clusters: &ClusterSet) -> Result<EvalReport> {
    let r = reprojection_error(
        &state.mesh,
        &AlbedoSource::from_state(state),
        clusters,
        &state_poses(state),
        LightingMode::Fitted,
    )?;
    let mut report = EvalReport::from_reprojection(r, LightingMode::Fitted, clusters.counts());
    report.seams = Some(state_seams(state));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub photo_counts: BTreeMap<i32, usize>,
    /// Error name of a failed run.
    pub failure: Option<String>,
    pub reprojection_mean: Option<f64>,
    pub reprojection_std: Option<f64>,
}

/// Seeded uniform subsample of `floor(n * fraction)` photos per cluster.
pub fn subsample(clusters: &ClusterSet, fraction: f64, seed: u64) -> Result<ClusterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clusters.clone();
    for c in out.clusters.values_mut() {
        let n = c.len();
        let k = ((n as f64 * fraction).floor() as usize).min(n);
        let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        *c = c.subset(&idx)?;
    }
    Ok(out)
}

/// Rerun the pipeline on subsampled collections and score each result
/// against the full photo set. Failed runs become rows naming the error.
pub fn ablate_photo_count(clusters: &ClusterSet, fractions: &[f64], seed: u64, cfg: &PipelineConfig) -> Vec<AblationRow> {
    fractions
        .par_iter()
        .map(|&fraction| {
            let run = || -> Result<(BTreeMap<i32, usize>, Reprojection)> {
                let sub = subsample(clusters, fraction, seed)?;
                let counts = sub.counts();
                let state = run_pipeline(&sub, cfg, None)?;
                let r = reprojection_error(
                    &state.mesh,
                    &AlbedoSource::from_state(&state),
                    clusters,
                    &state_poses(&state),
                    LightingMode::Fitted,
                )?;
                Ok((counts, r))
            };
            match run() {
                Ok((photo_counts, r)) => AblationRow {
                    fraction,
                    photo_counts,
                    failure: None,
                    reprojection_mean: Some(r.mean),
                    reprojection_std: Some(r.std),
                },
                Err(e) => AblationRow {
                    fraction,
                    photo_counts: subsample(clusters, fraction, seed).map(|s| s.counts()).unwrap_or_default(),
                    failure: Some(e.name().to_string()),
                    reprojection_mean: None,
                    reprojection_std: None,
                },
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("fraction,photos,status,reprojection_mean,reprojection_std\n");
    for r in rows {
        let total: usize = r.photo_counts.values().sum();
        let status = r.failure.as_deref().unwrap_or("ok");
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.fraction,
            total,
            status,
            fmt(r.reprojection_mean),
            fmt(r.reprojection_std)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::yaw_rotation;
    use nalgebra::Isometry3;

    fn hemisphere(size: usize) -> NormalField {
        let c = (size as f64 - 1.0) / 2.0;
        let r = size as f64 * 0.45;
        NormalField::from_normals(&Grid::from_fn(size, size, |x, y| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let z2 = r * r - dx * dx - dy * dy;
            (z2 > 0.0).then(|| Vector3::new(dx, dy, z2.sqrt()) / r)
        }))
    }

    #[test]
    fn angular_error_of_self_is_zero() {
        let f = hemisphere(20);
        let e = normal_angular_error(&f, &f).unwrap();
        assert!(e.median < 1e-6 && e.mean < 1e-6);
        assert_eq!(e.pixels, f.valid_count());
    }

    #[test]
    fn yaw_rotation_of_horizontal_normals_gives_its_angle() {
        let normals = Grid::from_fn(8, 8, |x, _| {
            let t = x as f64 * 0.3 - 1.0;
            Some(Vector3::new(t.sin(), 0.0, t.cos()))
        });
        let gt = NormalField::from_normals(&normals);
        let rot = yaw_rotation(10.0);
        let est = NormalField::from_normals(&normals.map(|n| n.map(|n| rot * n)));
        let e = normal_angular_error(&est, &gt).unwrap();
        assert!((e.median - 10.0).abs() < 1e-9 && (e.mean - 10.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_fields_have_no_overlap() {
        let a = NormalField::from_normals(&Grid::from_fn(4, 4, |x, _| (x < 2).then(Vector3::z)));
        let b = NormalField::from_normals(&Grid::from_fn(4, 4, |x, _| (x >= 2).then(Vector3::z)));
        assert!(matches!(normal_angular_error(&a, &b), Err(Error::NoValidOverlap)));
    }

    fn depth(f: impl Fn(usize, usize) -> f64) -> DepthMap {
        DepthMap {
            depth: Grid::from_fn(9, 7, |x, y| f(x, y)),
            valid: Grid::from_fn(9, 7, |x, y| x + y > 1),
            camera_to_world: Isometry3::identity(),
        }
    }

    #[test]
    fn depth_rmse_absorbs_affine_gauge() {
        let gt = depth(|x, y| (x as f64 * 0.4).sin() + y as f64 * 0.1);
        let est = depth(|x, y| 3.0 * ((x as f64 * 0.4).sin() + y as f64 * 0.1) + 7.0);
        let fit = depth_rmse(&est, &gt).unwrap();
        assert!(fit.rmse < 1e-12);
        assert!((fit.scale - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(depth_rmse(&gt, &gt).unwrap().rmse, 0.0);
    }

    #[test]
    fn constant_estimate_is_degenerate() {
        let gt = depth(|x, _| x as f64);
        assert!(matches!(depth_rmse(&depth(|_, _| 4.0), &gt), Err(Error::DegenerateFit)));
    }

    #[test]
    fn lighting_fit_recovers_shadowed_light() {
        let l = Vector3::new(0.5, -0.2, 0.8).normalize();
        let samples: Vec<(f64, Vector3<f64>, f64)> = (0..400)
            .map(|k| {
                let t = k as f64 * 0.37;
                let n = Vector3::new(t.cos() * 0.9, t.sin() * 0.9, (1.0f64 - 0.81).sqrt() * (1.0 + (k % 3) as f64)).normalize();
                let a = 0.5 + 0.001 * k as f64;
                (a * (40.0 + 150.0 * l.dot(&n).max(0.0)), n, a)
            })
            .collect();
        let c = fit_lighting(&samples, 3);
        assert!((c[0] - 40.0).abs() < 1e-6, "{c}");
        assert!((Vector3::new(c[1], c[2], c[3]) - 150.0 * l).norm() < 1e-6);
    }

    #[test]
    fn csv_rows_name_failures() {
        let rows = vec![
            AblationRow {
                fraction: 1.0,
                photo_counts: [(0, 8)].into(),
                failure: None,
                reprojection_mean: Some(2.5),
                reprojection_std: Some(0.5),
            },
            AblationRow {
                fraction: 0.0625,
                photo_counts: [(0, 0)].into(),
                failure: Some("TooFewPhotos".into()),
                reprojection_mean: None,
                reprojection_std: None,
            },
        ];
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("0.0625,0,TooFewPhotos,NA,NA"));
    }
}
