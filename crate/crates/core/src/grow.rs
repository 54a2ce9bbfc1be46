//! Boundary-value growing: reconstruct the frontal cluster, then extend the
//! mesh one side cluster at a time, each anchored to what is already built.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Isometry3, Point2, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{apply_ambiguity, solve_linear_ambiguity, AmbiguityTransform};
use crate::error::{Error, Result};
use crate::geometry::{
    angle_degrees, camera_to_pixel, facing_normal, fit_similarity, image_center, nominal_pose, pixel_to_camera,
    pose_yaw_degrees, yaw_rotation, Pose,
};
use crate::grid::{Grid, Mask};
use crate::ingest::{inner_neighbor, ClusterSet, PhotoCluster, CLUSTER_BINS};
use crate::integrate::{integrate_normals, make_blend_mask_within, BoundaryConstraint, DepthMap, IntegrationOptions};
use crate::mesh::HeadMesh;
use crate::photometric::{
    build_intensity_matrix, estimate_pixel_normals, factor_rank4, GateOptions, LightingBasis, NormalField, Region,
    MIN_PHOTOS,
};
use crate::raster::{rasterize, Fragment};

/// Side clusters in the order they are grown.
pub const GROWING_ORDER: [i32; 6] = [30, 60, 90, -30, -60, -90];

/// Thresholds of the reconstruction pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub integration: IntegrationOptions,
    pub gate: GateOptions,
    /// Width in pixels over which boundary weights ramp from 0 to 1.
    pub blend_band: f64,
    /// Erosion of the average-image support used as factorization region
    /// when a cluster has no face mask.
    pub face_erosion: usize,
    /// Erosion of the rendered reference before it is used for the
    /// ambiguity regression (its silhouette normals are unreliable).
    pub reference_erosion: usize,
    /// Triangles with a 3D edge longer than this multiple of the median
    /// edge are dropped.
    pub edge_filter: f64,
    /// Pixel distance under which a new sample merges into an existing vertex.
    pub duplicate_radius: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            integration: IntegrationOptions::default(),
            gate: GateOptions::default(),
            blend_band: 10.0,
            face_erosion: 2,
            reference_erosion: 2,
            edge_filter: 5.0,
            duplicate_radius: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nz_degenerate", self.integration.nz_degenerate),
            ("solver tolerance", self.integration.tolerance),
            ("blend_band", self.blend_band),
            ("gate multiplier", self.gate.multiplier),
            ("edge_filter", self.edge_filter),
            ("duplicate_radius", self.duplicate_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.gate.iterations == 0 {
            return Err(Error::InvalidConfig("gate iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Pose of a cluster's camera relative to the world (frontal) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub yaw_degrees: f64,
    pub roll_degrees: f64,
    /// Scale of the fiducial similarity fit; recorded, not applied.
    pub fit_scale: f64,
    pub translation: [f64; 2],
    pub fiducial_rms: f64,
    /// True when no fiducials were available and only the nominal azimuth is used.
    pub nominal_only: bool,
}

impl PoseEstimate {
    pub fn identity() -> Self {
        Self {
            pose: Isometry3::identity(),
            yaw_degrees: 0.0,
            roll_degrees: 0.0,
            fit_scale: 1.0,
            translation: [0.0, 0.0],
            fiducial_rms: 0.0,
            nominal_only: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub photos: usize,
    pub valid_pixels: usize,
    /// Fraction of intensity energy captured by the rank-4 factorization.
    pub captured_energy: f64,
    /// Fourth over first singular value.
    pub lighting_ratio: f64,
    pub ambiguity_condition: f64,
    pub overlap_pixels: usize,
    /// Mean angle to the ambiguity reference before and after correction.
    pub reference_angle_before: f64,
    pub reference_angle_after: f64,
    /// Mean |D - D_ref| where the blend weight exceeds 0.9.
    pub boundary_agreement: Option<f64>,
    pub new_vertices: usize,
    pub moved_vertices: usize,
    /// Moved vertices put back because they uncovered a canonical view.
    #[serde(default)]
    pub reverted_vertices: usize,
    pub merged_pixels: usize,
}

/// Everything computed for one completed cluster.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub cluster_id: i32,
    pub pose: PoseEstimate,
    pub depth: DepthMap,
    /// Normals after ambiguity correction, in the cluster's camera frame.
    pub normals: NormalField,
    pub lighting: LightingBasis,
    pub selected: Grid<u32>,
    pub ambiguity: AmbiguityTransform,
    /// Blend weights used as boundary data (side clusters only).
    pub blend: Option<Grid<f64>>,
    pub stats: ClusterStats,
}

#[derive(Debug, Clone, Default)]
pub struct GrowState {
    pub mesh: HeadMesh,
    pub clusters: BTreeMap<i32, ClusterResult>,
    pub completed: Vec<i32>,
}

impl GrowState {
    pub fn is_completed(&self, cluster: i32) -> bool {
        self.completed.contains(&cluster)
    }

    /// Check that `target` may be grown next.
    pub fn check_growable(&self, target: i32) -> Result<()> {
        if self.is_completed(target) {
            return Err(Error::AlreadyCompleted(target));
        }
        if target == 0 {
            return Ok(());
        }
        let neighbor = inner_neighbor(target).ok_or(Error::UnknownCluster(target))?;
        if !GROWING_ORDER.contains(&target) {
            return Err(Error::UnknownCluster(target));
        }
        if !self.is_completed(neighbor) {
            return Err(Error::NeighborNotCompleted { target, neighbor });
        }
        Ok(())
    }
}

/// Photometric normals of one cluster, before ambiguity correction.
pub struct PhotometricSolve {
    pub field: NormalField,
    pub lighting: LightingBasis,
    pub selected: Grid<u32>,
    pub captured_energy: f64,
    pub lighting_ratio: f64,
}

/// Factorization region: the cluster's face mask, else its eroded average support.
pub fn factorization_region(cluster: &PhotoCluster, erosion: usize) -> Mask {
    match &cluster.face_mask {
        Some(m) => m.and(&cluster.average.valid),
        None => cluster.average.valid.erode(erosion),
    }
}

pub fn solve_photometric(cluster: &PhotoCluster, cfg: &PipelineConfig) -> Result<PhotometricSolve> {
    if cluster.len() < MIN_PHOTOS {
        return Err(Error::TooFewPhotos {
            found: cluster.len(),
            required: MIN_PHOTOS,
        });
    }
    let region = factorization_region(cluster, cfg.face_erosion);
    let q = build_intensity_matrix(cluster, &region, Region::Face)?;
    let fact = factor_rank4(&q)?;
    let est = estimate_pixel_normals(cluster, &fact.lighting, &cluster.average.valid, cfg.gate);
    let sv = &fact.singular_values;
    Ok(PhotometricSolve {
        field: est.field,
        lighting: fact.lighting.clone(),
        selected: est.selected,
        captured_energy: fact.captured_energy(),
        lighting_ratio: if sv[0] > 0.0 { sv[3] / sv[0] } else { 0.0 },
    })
}

fn mean_angle(a: &NormalField, b: &NormalField, mask: &Mask) -> f64 {
    let (sum, n) = (0..mask.len())
        .filter(|&i| mask.as_slice()[i] && a.valid.as_slice()[i] && b.valid.as_slice()[i])
        .fold((0.0, 0usize), |(s, n), i| {
            (s + angle_degrees(&a.normals.as_slice()[i], &b.normals.as_slice()[i]), n + 1)
        });
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Two triangles per grid cell (one when a corner is missing), wound
/// counter-clockwise as seen from the camera.
fn grid_triangles(index: &Grid<Option<usize>>) -> Vec<[usize; 3]> {
    let (w, h) = index.dims();
    let mut out = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let a = *index.get(x, y);
            let b = *index.get(x + 1, y);
            let c = *index.get(x, y + 1);
            let d = *index.get(x + 1, y + 1);
            match (a, b, c, d) {
                (Some(a), Some(b), Some(c), Some(d)) => {
                    out.push([a, b, d]);
                    out.push([a, d, c]);
                }
                (Some(a), Some(b), Some(c), None) => out.push([a, b, c]),
                (Some(a), Some(b), None, Some(d)) => out.push([a, b, d]),
                (Some(a), None, Some(c), Some(d)) => out.push([a, d, c]),
                (None, Some(b), Some(c), Some(d)) => out.push([b, d, c]),
                _ => {}
            }
        }
    }
    out
}

/// Drop triangles with repeated vertices or an edge longer than
/// `factor` times the median edge of the candidates.
fn filter_triangles(vertices: &[Point3<f64>], tris: Vec<[usize; 3]>, factor: f64) -> Vec<[usize; 3]> {
    let tris: Vec<[usize; 3]> = tris
        .into_iter()
        .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
        .collect();
    let longest = |t: &[usize; 3]| {
        (0..3)
            .map(|k| (vertices[t[k]] - vertices[t[(k + 1) % 3]]).norm())
            .fold(0.0, f64::max)
    };
    let mut edges: Vec<f64> = tris
        .iter()
        .flat_map(|t| (0..3).map(move |k| (t[k], t[(k + 1) % 3])))
        .map(|(a, b)| (vertices[a] - vertices[b]).norm())
        .collect();
    if edges.is_empty() {
        return tris;
    }
    let med = crate::photometric::median(&mut edges);
    let limit = factor * med;
    tris.into_iter()
        .filter(|t| longest(t) <= limit && facing_normal(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]).is_some())
        .collect()
}

/// World-frame point of pixel `(x, y)` of a depth map.
pub fn depth_point(depth: &DepthMap, x: usize, y: usize) -> Option<Point3<f64>> {
    let z = depth.get(x, y)?;
    let (w, h) = depth.dims();
    Some(depth.camera_to_world * pixel_to_camera(x as f64, y as f64, z, image_center(w, h)))
}

/// Pixel-grid triangulation of a depth map in the world frame.
pub fn lift_depth_map(depth: &DepthMap, cluster: i32, edge_filter: f64) -> HeadMesh {
    let (w, h) = depth.dims();
    let mut vertices = Vec::new();
    let index = Grid::from_fn(w, h, |x, y| {
        depth_point(depth, x, y).map(|p| {
            vertices.push(p);
            vertices.len() - 1
        })
    });
    let faces = filter_triangles(&vertices, grid_triangles(&index), edge_filter);
    HeadMesh::new(vertices, faces, cluster)
}

/// Camera-space positions and pixel projections of a mesh under a pose.
fn project_mesh(mesh: &HeadMesh, pose: &Pose, center: (f64, f64)) -> (Vec<Point3<f64>>, Vec<Point3<f64>>) {
    let cam: Vec<Point3<f64>> = mesh.vertices.iter().map(|v| pose * v).collect();
    let projected = cam
        .iter()
        .map(|p| {
            let (x, y, z) = camera_to_pixel(p, center);
            Point3::new(x, y, z)
        })
        .collect();
    (cam, projected)
}

/// Faces whose winding faces the camera (outward faces seen from outside).
fn front_faces(mesh: &HeadMesh, cam: &[Point3<f64>]) -> Vec<usize> {
    (0..mesh.faces.len())
        .filter(|&i| {
            let [a, b, c] = mesh.faces[i].map(|v| cam[v]);
            (b - a).cross(&(c - a)).z > 0.0
        })
        .collect()
}

/// Rasterize the front faces of a mesh seen by a camera with the given
/// pose. Returns the z-buffer with face indices into `mesh.faces`.
pub fn render_mesh(mesh: &HeadMesh, pose: &Pose, (w, h): (usize, usize)) -> Grid<Option<Fragment>> {
    let (cam, projected) = project_mesh(mesh, pose, image_center(w, h));
    let visible = front_faces(mesh, &cam);
    let faces: Vec<[usize; 3]> = visible.iter().map(|&i| mesh.faces[i]).collect();
    rasterize(w, h, &projected, &faces).map(|f| f.map(|f| Fragment { face: visible[f.face], ..f }))
}

/// Rasterize the mesh as seen by a camera with the given pose: reference
/// depth and per-pixel normals of the visible faces (camera frame).
pub fn render_reference(mesh: &HeadMesh, pose: &Pose, (w, h): (usize, usize)) -> Result<(DepthMap, NormalField)> {
    let buffer = render_mesh(mesh, pose, (w, h));
    if buffer.iter().all(Option::is_none) {
        return Err(Error::EmptyProjection);
    }
    let normal_of = |face: usize| {
        let [a, b, c] = mesh.faces[face].map(|v| pose * mesh.vertices[v]);
        facing_normal(&a, &b, &c)
    };
    let depth = DepthMap {
        depth: buffer.map(|f| f.map_or(0.0, |f| f.depth)),
        valid: buffer.map(Option::is_some),
        camera_to_world: pose.inverse(),
    };
    let normals = NormalField::from_normals(&buffer.map(|f| f.and_then(|f| normal_of(f.face))));
    Ok((depth, normals))
}

fn roll_rotation(radians: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), radians)
}

/// Nominal yaw of the target cluster refined by a rigid in-plane fit of
/// the mesh's projected fiducials to the cluster's reference layout.
pub fn estimate_pose_to_cluster(state: &GrowState, clusters: &ClusterSet, target: i32) -> Result<PoseEstimate> {
    if target == 0 {
        return Ok(PoseEstimate::identity());
    }
    let neighbor = inner_neighbor(target).ok_or(Error::UnknownCluster(target))?;
    if !state.is_completed(neighbor) {
        return Err(Error::NeighborNotCompleted { target, neighbor });
    }
    let cluster = clusters.get(target)?;
    let nominal = nominal_pose(target as f64);
    let Some(fid) = state.mesh.fiducial_vertices else {
        return Ok(PoseEstimate {
            pose: nominal,
            yaw_degrees: target as f64,
            nominal_only: true,
            ..PoseEstimate::identity()
        });
    };
    let rot = yaw_rotation(target as f64);
    let src: Vec<Point2<f64>> = fid
        .iter()
        .map(|&v| {
            let p = rot * state.mesh.vertices[v];
            Point2::new(p.x, p.y)
        })
        .collect();
    let (w, h) = cluster.dims();
    let c = image_center(w, h);
    let dst: Vec<Point2<f64>> = cluster
        .reference_fiducials
        .iter()
        .map(|p| Point2::new(p.x - c.0, p.y - c.1))
        .collect();
    let sim = fit_similarity(&src, &dst)?;
    let angle = sim.angle();
    let r2 = nalgebra::Rotation2::new(angle);
    let n = src.len() as f64;
    let ms = src.iter().fold(nalgebra::Vector2::zeros(), |a, p| a + p.coords) / n;
    let md = dst.iter().fold(nalgebra::Vector2::zeros(), |a, p| a + p.coords) / n;
    let t = md - r2 * ms;
    let rms = (src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (r2 * s.coords + t - d.coords).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    let rotation = roll_rotation(angle) * rot;
    let pose = Isometry3::from_parts(
        Translation3::new(t.x, t.y, 0.0),
        UnitQuaternion::from_rotation_matrix(&rotation),
    );
    Ok(PoseEstimate {
        yaw_degrees: pose_yaw_degrees(&pose),
        pose,
        roll_degrees: angle.to_degrees(),
        fit_scale: sim.scale(),
        translation: [t.x, t.y],
        fiducial_rms: rms,
        nominal_only: false,
    })
}

/// Photometric solve, template ambiguity and unconstrained integration of
/// the frontal cluster, lifted to the initial mesh.
pub fn reconstruct_frontal(clusters: &ClusterSet, cfg: &PipelineConfig) -> Result<GrowState> {
    cfg.validate()?;
    let cluster = clusters.clusters.get(&0).ok_or(Error::MissingFrontalCluster)?;
    let template = clusters
        .template_normals
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("template normals are required for the frontal cluster".into()))?;
    if template.dims() != cluster.dims() {
        return Err(Error::InvalidConfig(format!(
            "template normals are {:?} but the frontal frame is {:?}",
            template.dims(),
            cluster.dims()
        )));
    }
    let ps = solve_photometric(cluster, cfg)?;
    let region = factorization_region(cluster, cfg.face_erosion);
    let overlap = region.and(&ps.field.valid).and(&template.valid);
    let a = solve_linear_ambiguity(&ps.field, template, &overlap)?;
    let field = apply_ambiguity(&a, &ps.field)?;
    let depth = integrate_normals(&field, None, &cfg.integration)?;
    let mut mesh = lift_depth_map(&depth, 0, cfg.edge_filter);
    mesh.fiducial_vertices = nearest_vertices(&depth, &cluster.reference_fiducials, &mesh);
    let stats = ClusterStats {
        photos: cluster.len(),
        valid_pixels: field.valid_count(),
        captured_energy: ps.captured_energy,
        lighting_ratio: ps.lighting_ratio,
        ambiguity_condition: a.condition(),
        overlap_pixels: overlap.count(),
        reference_angle_before: mean_angle(&ps.field, template, &overlap),
        reference_angle_after: mean_angle(&field, template, &overlap),
        boundary_agreement: None,
        new_vertices: mesh.vertices.len(),
        moved_vertices: 0,
        reverted_vertices: 0,
        merged_pixels: 0,
    };
    let mut state = GrowState {
        mesh,
        ..Default::default()
    };
    state.clusters.insert(
        0,
        ClusterResult {
            cluster_id: 0,
            pose: PoseEstimate::identity(),
            depth,
            normals: field,
            lighting: ps.lighting,
            selected: ps.selected,
            ambiguity: a,
            blend: None,
            stats,
        },
    );
    state.completed.push(0);
    Ok(state)
}

/// Vertices of the frontal lift nearest to each reference fiducial.
fn nearest_vertices(depth: &DepthMap, fiducials: &[Point2<f64>; 7], mesh: &HeadMesh) -> Option<[usize; 7]> {
    if mesh.vertices.is_empty() {
        return None;
    }
    let center = image_center(depth.dims().0, depth.dims().1);
    let mut out = [0usize; 7];
    for (o, f) in out.iter_mut().zip(fiducials) {
        let (fx, fy) = (f.x - center.0, f.y - center.1);
        // The lift has identity pose, so x/y are pixel offsets.
        *o = (0..mesh.vertices.len())
            .min_by(|&a, &b| {
                let da = (mesh.vertices[a].x - fx).powi(2) + (mesh.vertices[a].y - fy).powi(2);
                let db = (mesh.vertices[b].x - fx).powi(2) + (mesh.vertices[b].y - fy).powi(2);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap();
    }
    Some(out)
}

/// Bookkeeping of one fusion step.
#[derive(Debug, Clone, Copy, Default)]
pub struct FusionStats {
    pub new_vertices: usize,
    pub moved_vertices: usize,
    pub reverted_vertices: usize,
    pub merged_pixels: usize,
}

/// Mesh vertices visible in a reference rendering, with their pixel
/// positions and camera depths.
fn visible_vertices(mesh: &HeadMesh, pose: &Pose, d_ref: &DepthMap) -> Vec<(usize, f64, f64, f64)> {
    let (w, h) = d_ref.dims();
    let center = image_center(w, h);
    let mut out = Vec::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let (x, y, z) = camera_to_pixel(&(pose * v), center);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            continue;
        }
        let Some(zr) = d_ref.sample(x, y) else { continue };
        let (x0, y0) = ((x.floor() as usize).min(w - 1), (y.floor() as usize).min(h - 1));
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(a, b)| *d_ref.depth.get(a, b));
        let spread = corners.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - corners.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if (z - zr).abs() <= 1.0 + spread {
            out.push((i, x, y, z));
        }
    }
    out
}

/// Undo vertex moves until no canonical view loses a pixel it covered in
/// `baseline`. Faces are only ever appended, so putting back the moved
/// vertices of a face that used to cover a lost pixel restores it.
fn keep_silhouettes(mesh: &mut HeadMesh, baseline: &[Grid<Option<Fragment>>], moved: &mut BTreeMap<usize, Point3<f64>>) -> usize {
    let mut reverted = 0;
    while !moved.is_empty() {
        let faces: BTreeSet<usize> = CLUSTER_BINS
            .par_iter()
            .zip(baseline)
            .map(|(&v, base)| {
                let now = render_mesh(mesh, &nominal_pose(v as f64), base.dims());
                base.iter()
                    .zip(now.iter())
                    .filter_map(|(b, n)| match (b, n) {
                        (Some(b), None) => Some(b.face),
                        _ => None,
                    })
                    .collect::<Vec<_>>()
            })
            .flatten()
            .collect();
        if faces.is_empty() {
            break;
        }
        let before = reverted;
        for f in faces {
            for v in mesh.faces[f] {
                if let Some(p) = moved.remove(&v) {
                    mesh.vertices[v] = p;
                    reverted += 1;
                }
            }
        }
        if reverted == before {
            break;
        }
    }
    reverted
}

/// Whether vertices from cluster `source` lie between the frontal view and
/// `target` on its side, i.e. on the depth maps `target` was grown from.
fn on_inner_chain(source: i32, target: i32) -> bool {
    source == 0 || (source.signum() == target.signum() && source.abs() < target.abs())
}

/// Merge a new depth map into the mesh. Existing vertices visible in the new
/// view are pulled toward the new depth where the blend weight is below 1;
/// new samples within `radius` pixels of such a vertex reuse it; the rest
/// become vertices with provenance `cluster`, triangulated on the new grid.
pub fn fuse_depth_map(
    mesh: &mut HeadMesh,
    depth: &DepthMap,
    pose: &Pose,
    d_ref: &DepthMap,
    weights: &Grid<f64>,
    cluster: i32,
    cfg: &PipelineConfig,
) -> FusionStats {
    let (w, h) = depth.dims();
    let center = image_center(w, h);
    let inv = pose.inverse();
    let mut stats = FusionStats::default();
    let visible = visible_vertices(mesh, pose, d_ref);
    let baseline: Vec<Grid<Option<Fragment>>> = CLUSTER_BINS
        .par_iter()
        .map(|&v| render_mesh(mesh, &nominal_pose(v as f64), (w, h)))
        .collect();
    let mut moved: BTreeMap<usize, Point3<f64>> = BTreeMap::new();
    for &(i, x, y, z) in &visible {
        if !on_inner_chain(mesh.provenance[i], cluster) {
            continue;
        }
        let wt = weights.sample_bilinear(x, y).unwrap_or(0.0).clamp(0.0, 1.0);
        if wt >= 1.0 {
            continue;
        }
        if let Some(zn) = depth.sample(x, y) {
            let znew = wt * z + (1.0 - wt) * zn;
            moved.insert(i, mesh.vertices[i]);
            mesh.vertices[i] = inv * pixel_to_camera(x, y, znew, center);
            stats.moved_vertices += 1;
        }
    }
    // Bucket visible vertices by pixel for the duplicate search.
    let mut buckets: BTreeMap<(usize, usize), Vec<(usize, f64, f64)>> = BTreeMap::new();
    for &(i, x, y, _) in &visible {
        buckets
            .entry((x.round() as usize, y.round() as usize))
            .or_default()
            .push((i, x, y));
    }
    let r = cfg.duplicate_radius;
    let reach = r.ceil() as i64;
    let n_old = mesh.vertices.len();
    let mut index: Grid<Option<usize>> = Grid::filled(w, h, None);
    for y in 0..h {
        for x in 0..w {
            let Some(z) = depth.get(x, y) else { continue };
            let mut best: Option<(f64, usize)> = None;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (bx, by) = (x as i64 + dx, y as i64 + dy);
                    if bx < 0 || by < 0 {
                        continue;
                    }
                    if let Some(list) = buckets.get(&(bx as usize, by as usize)) {
                        for &(i, vx, vy) in list {
                            let d2 = (vx - x as f64).powi(2) + (vy - y as f64).powi(2);
                            if d2 <= r * r && best.map_or(true, |(b, j)| d2 < b || (d2 == b && i < j)) {
                                best = Some((d2, i));
                            }
                        }
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    index.set(x, y, Some(i));
                    stats.merged_pixels += 1;
                }
                None => {
                    mesh.vertices.push(inv * pixel_to_camera(x as f64, y as f64, z, center));
                    mesh.provenance.push(cluster);
                    index.set(x, y, Some(mesh.vertices.len() - 1));
                    stats.new_vertices += 1;
                }
            }
        }
    }
    let tris: Vec<[usize; 3]> = grid_triangles(&index)
        .into_iter()
        .filter(|t| t.iter().any(|&v| v >= n_old))
        .collect();
    mesh.faces.extend(filter_triangles(&mesh.vertices, tris, cfg.edge_filter));
    stats.reverted_vertices = keep_silhouettes(mesh, &baseline, &mut moved);
    stats
}

/// Reconstruct one side cluster against the current mesh and fuse it in.
pub fn grow_cluster(state: &mut GrowState, clusters: &ClusterSet, target: i32, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    state.check_growable(target)?;
    if target == 0 {
        return Err(Error::InvalidConfig("the frontal cluster is reconstructed, not grown".into()));
    }
    let cluster = match clusters.clusters.get(&target) {
        Some(c) => c,
        None => {
            return Err(Error::TooFewPhotos {
                found: 0,
                required: MIN_PHOTOS,
            })
        }
    };
    let ps = solve_photometric(cluster, cfg)?;
    let pose = estimate_pose_to_cluster(state, clusters, target)?;
    let dims = cluster.dims();
    let (d_ref, n_ref) = render_reference(&state.mesh, &pose.pose, dims)?;
    let overlap = ps.field.valid.and(&n_ref.valid.erode(cfg.reference_erosion));
    let a = solve_linear_ambiguity(&ps.field, &n_ref, &overlap)?;
    let field = apply_ambiguity(&a, &ps.field)?;
    let weights = make_blend_mask_within(&d_ref.valid, &field.valid, cfg.blend_band)?;
    let z0 = Grid::from_fn(dims.0, dims.1, |x, y| d_ref.get(x, y));
    let bc = BoundaryConstraint::new(&z0, &weights);
    let mut depth = integrate_normals(&field, Some(&bc), &cfg.integration)?;
    depth.camera_to_world = pose.pose.inverse();
    let agreement = {
        let (sum, n) = (0..weights.len())
            .filter(|&i| weights.as_slice()[i] > 0.9 && depth.valid.as_slice()[i])
            .fold((0.0, 0usize), |(s, n), i| {
                (s + (depth.depth.as_slice()[i] - d_ref.depth.as_slice()[i]).abs(), n + 1)
            });
        (n > 0).then(|| sum / n as f64)
    };
    let fusion = fuse_depth_map(&mut state.mesh, &depth, &pose.pose, &d_ref, &weights, target, cfg);
    let stats = ClusterStats {
        photos: cluster.len(),
        valid_pixels: field.valid_count(),
        captured_energy: ps.captured_energy,
        lighting_ratio: ps.lighting_ratio,
        ambiguity_condition: a.condition(),
        overlap_pixels: overlap.count(),
        reference_angle_before: mean_angle(&ps.field, &n_ref, &overlap),
        reference_angle_after: mean_angle(&field, &n_ref, &overlap),
        boundary_agreement: agreement,
        new_vertices: fusion.new_vertices,
        moved_vertices: fusion.moved_vertices,
        reverted_vertices: fusion.reverted_vertices,
        merged_pixels: fusion.merged_pixels,
    };
    state.clusters.insert(
        target,
        ClusterResult {
            cluster_id: target,
            pose,
            depth,
            normals: field,
            lighting: ps.lighting,
            selected: ps.selected,
            ambiguity: a,
            blend: Some(weights),
            stats,
        },
    );
    state.completed.push(target);
    Ok(())
}

/// The merged head mesh gathered from every completed view.
pub fn merge_to_mesh(state: &GrowState) -> Result<HeadMesh> {
    if !state.is_completed(0) {
        return Err(Error::MissingFrontalCluster);
    }
    let mesh = state.mesh.clone();
    mesh.validate()?;
    Ok(mesh)
}

/// Clusters to grow, in order. With no explicit list every present side
/// cluster is grown until a side runs out.
pub fn growth_plan(clusters: &ClusterSet, requested: Option<&[i32]>) -> Vec<i32> {
    match requested {
        Some(list) => GROWING_ORDER.iter().copied().filter(|c| list.contains(c)).collect(),
        None => {
            let mut plan = Vec::new();
            for side in [GROWING_ORDER[..3].to_vec(), GROWING_ORDER[3..].to_vec()] {
                for c in side {
                    if !clusters.clusters.contains_key(&c) {
                        break;
                    }
                    plan.push(c);
                }
            }
            plan
        }
    }
}

/// Frontal reconstruction followed by growing through the plan.
pub fn run_pipeline(clusters: &ClusterSet, cfg: &PipelineConfig, requested: Option<&[i32]>) -> Result<GrowState> {
    let mut state = reconstruct_frontal(clusters, cfg)?;
    for target in growth_plan(clusters, requested) {
        grow_cluster(&mut state, clusters, target, cfg)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_depth(w: usize, h: usize) -> DepthMap {
        DepthMap {
            depth: Grid::from_fn(w, h, |x, y| 0.3 * x as f64 - 0.2 * y as f64 + 4.0),
            valid: Grid::from_fn(w, h, |x, y| x > 0 && y > 1),
            camera_to_world: Isometry3::identity(),
        }
    }

    #[test]
    fn lift_then_render_round_trips() {
        let d = plane_depth(12, 10);
        let mesh = lift_depth_map(&d, 0, 5.0);
        mesh.validate().unwrap();
        assert_eq!(mesh.vertices.len(), d.valid.count());
        assert!(mesh.provenance.iter().all(|&p| p == 0));
        let (r, n) = render_reference(&mesh, &Isometry3::identity(), (12, 10)).unwrap();
        assert_eq!(r.valid, d.valid);
        for y in 0..10 {
            for x in 0..12 {
                if let Some(z) = d.get(x, y) {
                    assert!((r.get(x, y).unwrap() - z).abs() < 1e-4);
                    let expect = Vector3::new(-0.3, 0.2, 1.0).normalize();
                    assert!((n.normals.get(x, y) - expect).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn lifted_faces_point_at_camera() {
        let mesh = lift_depth_map(&plane_depth(6, 6), 0, 5.0);
        for f in &mesh.faces {
            let [a, b, c] = f.map(|i| mesh.vertices[i]);
            assert!((b - a).cross(&(c - a)).z > 0.0);
        }
    }

    #[test]
    fn edge_filter_cuts_cliffs() {
        let mut d = plane_depth(10, 10);
        for y in 0..10 {
            for x in 5..10 {
                d.depth.set(x, y, 100.0);
            }
        }
        let mesh = lift_depth_map(&d, 0, 5.0);
        for f in &mesh.faces {
            let xs = f.map(|i| mesh.vertices[i].x);
            let c = image_center(10, 10).0;
            let left = xs.iter().all(|&x| x + c < 4.5);
            let right = xs.iter().all(|&x| x + c > 4.5);
            assert!(left || right, "triangle bridges the cliff");
        }
    }

    #[test]
    fn growing_order_enforced() {
        let mut state = GrowState::default();
        assert!(matches!(
            state.check_growable(30),
            Err(Error::NeighborNotCompleted { target: 30, neighbor: 0 })
        ));
        state.completed.push(0);
        state.check_growable(30).unwrap();
        state.check_growable(-30).unwrap();
        assert!(matches!(
            state.check_growable(60),
            Err(Error::NeighborNotCompleted { target: 60, neighbor: 30 })
        ));
        assert!(matches!(state.check_growable(0), Err(Error::AlreadyCompleted(0))));
        assert!(matches!(state.check_growable(45), Err(Error::UnknownCluster(45))));
    }

    #[test]
    fn config_thresholds_must_be_positive() {
        PipelineConfig::default().validate().unwrap();
        let mut c = PipelineConfig::default();
        c.blend_band = 0.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.integration.nz_degenerate = -1.0;
        assert!(c.validate().is_err());
    }
}
