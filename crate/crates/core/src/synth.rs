//! Lambertian rendering of a mesh under directional lights at the seven
//! canonical azimuths, with ground truth, plus a procedural head generator
//! for self-contained experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::GrayImage;
use nalgebra::{Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_to_pixel, fit_similarity, image_center, nominal_pose, yaw_rotation};
use crate::grid::{Grid, Mask};
use crate::ingest::{fiducials_to_array, ClusterSet, Fiducials, Photo, CLUSTER_BINS};
use crate::integrate::DepthMap;
use crate::manifest::{GroundTruth, Light, Manifest, PhotoEntry};
use crate::mesh::HeadMesh;
use crate::photometric::NormalField;
use crate::raster::rasterize;

/// Surface reflectance of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Albedo {
    Uniform(f64),
    PerVertex(Vec<f64>),
}

impl Albedo {
    fn at(&self, v: usize) -> f64 {
        match self {
            Albedo::Uniform(a) => *a,
            Albedo::PerVertex(a) => a[v],
        }
    }

    /// A single representative value (the mean for per-vertex albedo).
    pub fn mean(&self) -> f64 {
        match self {
            Albedo::Uniform(a) => *a,
            Albedo::PerVertex(a) if a.is_empty() => 0.0,
            Albedo::PerVertex(a) => a.iter().sum::<f64>() / a.len() as f64,
        }
    }
}

/// Unclamped Lambertian response on the 0-255 scale:
/// `255 albedo (ambient + intensity max(0, n.l))`.
#[inline]
pub fn radiance(albedo: f64, normal: &Vector3<f64>, light: &Light) -> f64 {
    let l = Vector3::from(light.direction);
    255.0 * albedo * (light.ambient + light.intensity * normal.dot(&l).max(0.0))
}

/// Clamped response, as a real-valued intensity.
#[inline]
pub fn shade(albedo: f64, normal: &Vector3<f64>, light: &Light) -> f64 {
    radiance(albedo, normal, light).clamp(0.0, 255.0)
}

/// Round to the nearest 8-bit level.
#[inline]
pub fn quantize(v: f64) -> f64 {
    v.clamp(0.0, 255.0).round()
}

/// A ground-truth scene. The mesh lives in the world frame, which is the
/// frontal camera frame in pixel units (x right, y down, z toward the
/// viewer), centered on the image center.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub mesh: HeadMesh,
    pub albedo: Albedo,
    pub lights: Vec<Light>,
    /// Azimuths in degrees; each must be one of the canonical bins.
    pub poses: Vec<f64>,
    pub image_size: (usize, usize),
    pub fiducial_vertices: [usize; 7],
    /// Number of lights (a prefix of `lights`) per pose; all of them when absent.
    pub lights_per_pose: BTreeMap<i32, usize>,
    /// A different individual whose frontal normals fix the frontal ambiguity.
    pub template: Option<(HeadMesh, [usize; 7])>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        for (i, l) in self.lights.iter().enumerate() {
            let n = Vector3::from(l.direction).norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("light {i} direction has norm {n}")));
            }
            if !(l.intensity >= 0.0 && l.ambient >= 0.0) {
                return Err(Error::InvalidConfig(format!("light {i} has a negative term")));
            }
        }
        for &p in &self.poses {
            if !CLUSTER_BINS.iter().any(|&b| b as f64 == p) {
                return Err(Error::InvalidConfig(format!("pose {p} is not a canonical azimuth")));
            }
        }
        if let Albedo::PerVertex(a) = &self.albedo {
            if a.len() != self.mesh.vertices.len() || a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidConfig("per-vertex albedo must match the mesh and lie in [0, 1]".into()));
            }
        }
        if self.fiducial_vertices.iter().any(|&v| v >= self.mesh.vertices.len()) {
            return Err(Error::InvalidConfig("fiducial vertex out of range".into()));
        }
        Ok(())
    }

    pub fn lights_for_pose(&self, pose: f64) -> &[Light] {
        let n = self
            .lights_per_pose
            .get(&(pose.round() as i32))
            .copied()
            .unwrap_or(self.lights.len())
            .min(self.lights.len());
        &self.lights[..n]
    }

    pub fn photo_count(&self) -> usize {
        self.poses.iter().map(|&p| self.lights_for_pose(p).len()).sum()
    }
}

/// Rasterized geometry of the scene at one pose, reusable across lights.
#[derive(Debug, Clone)]
pub struct PoseRender {
    pub pose: f64,
    pub normals: Grid<Option<Vector3<f64>>>,
    pub albedo: Grid<f64>,
    pub depth: Grid<Option<f64>>,
    pub fiducials: Fiducials,
}

impl PoseRender {
    pub fn new(scene: &SyntheticScene, pose: f64) -> Result<Self> {
        render_geometry(&scene.mesh, &scene.albedo, &scene.fiducial_vertices, scene.image_size, pose)
    }

    pub fn mask(&self) -> Mask {
        self.normals.map(Option::is_some)
    }

    /// Unclamped radiance, 0 outside the head.
    pub fn radiance(&self, light: &Light) -> Grid<f64> {
        Grid::from_fn(self.normals.width(), self.normals.height(), |x, y| match self.normals.get(x, y) {
            Some(n) => radiance(*self.albedo.get(x, y), n, light),
            None => 0.0,
        })
    }

    /// 8-bit intensities, 0 outside the head.
    pub fn shade(&self, light: &Light) -> Grid<f64> {
        self.radiance(light).map(|&v| quantize(v))
    }

    pub fn gt_normals(&self) -> NormalField {
        NormalField::from_normals(&self.normals)
    }

    pub fn gt_depth(&self) -> DepthMap {
        DepthMap {
            depth: self.depth.map(|d| d.unwrap_or(0.0)),
            valid: self.depth.map(Option::is_some),
            camera_to_world: nominal_pose(self.pose).inverse(),
        }
    }

    pub fn photo(&self, id: impl Into<String>, light: &Light) -> Result<Photo> {
        let mut photo = Photo::new(id, self.shade(light), self.mask(), self.fiducials, self.pose)?;
        photo.light = Some(*light);
        Ok(photo)
    }
}

/// Rasterize a world-frame mesh rotated by `pose` degrees of yaw.
pub fn render_geometry(
    mesh: &HeadMesh,
    albedo: &Albedo,
    fiducial_vertices: &[usize; 7],
    (w, h): (usize, usize),
    pose: f64,
) -> Result<PoseRender> {
    let rot = yaw_rotation(pose);
    let center = image_center(w, h);
    let projected: Vec<Point3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| {
            let (x, y, z) = camera_to_pixel(&(rot * v), center);
            Point3::new(x, y, z)
        })
        .collect();
    let buffer = rasterize(w, h, &projected, &mesh.faces);
    if buffer.iter().all(Option::is_none) {
        return Err(Error::EmptyProjection);
    }
    let vn: Vec<Vector3<f64>> = mesh.vertex_normals().into_iter().map(|n| rot * n).collect();
    let mut normals = Grid::filled(w, h, None);
    let mut alb = Grid::filled(w, h, 0.0);
    let mut depth = Grid::filled(w, h, None);
    for (i, frag) in buffer.iter().enumerate() {
        let Some(frag) = frag else { continue };
        let f = mesh.faces[frag.face];
        let n = frag.interpolate(vn[f[0]], vn[f[1]], vn[f[2]]);
        let len = n.norm();
        if !(len > 1e-12) {
            continue;
        }
        normals.as_mut_slice()[i] = Some(n / len);
        alb.as_mut_slice()[i] = match albedo {
            Albedo::Uniform(a) => *a,
            Albedo::PerVertex(_) => frag.interpolate(albedo.at(f[0]), albedo.at(f[1]), albedo.at(f[2])),
        };
        depth.as_mut_slice()[i] = Some(frag.depth);
    }
    let fiducials = fiducial_vertices.map(|v| Point2::new(projected[v].x, projected[v].y));
    Ok(PoseRender {
        pose,
        normals,
        albedo: alb,
        depth,
        fiducials,
    })
}

/// One rendered photo and the ground truth at its pose.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub photo: Photo,
    pub gt_normals: NormalField,
    pub gt_depth: DepthMap,
}

pub fn render_lambertian(scene: &SyntheticScene, pose: f64, light_index: usize) -> Result<Rendering> {
    let light = scene
        .lights
        .get(light_index)
        .ok_or_else(|| Error::InvalidConfig(format!("no light {light_index}")))?;
    let geo = PoseRender::new(scene, pose)?;
    Ok(Rendering {
        photo: geo.photo(photo_id(pose, light_index), light)?,
        gt_normals: geo.gt_normals(),
        gt_depth: geo.gt_depth(),
    })
}

pub fn pose_tag(pose: f64) -> String {
    let p = pose.round() as i32;
    if p < 0 {
        format!("m{}", -p)
    } else {
        format!("p{p}")
    }
}

pub fn photo_id(pose: f64, light_index: usize) -> String {
    format!("{}_{light_index:03}", pose_tag(pose))
}

/// `n` lights uniformly distributed over the cap `z > 0.2` of the unit
/// sphere (camera frame).
pub fn sample_lights(n: usize, seed: u64, ambient: f64, intensity: f64) -> Vec<Light> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            // Uniform on a spherical cap: z uniform, azimuth uniform.
            let z: f64 = rng.gen_range(0.2..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let d = Vector3::new(r * phi.cos(), r * phi.sin(), z).normalize();
            Light {
                direction: [d.x, d.y, d.z],
                intensity,
                ambient,
            }
        })
        .collect()
}

/// Shape parameters of the procedural head, in model units (y up, z
/// forward, roughly unit radius).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadShape {
    pub width: f64,
    pub height: f64,
    pub depth: f64,
    pub nose: f64,
    pub chin: f64,
    pub brow: f64,
    pub eye_socket: f64,
    pub ears: f64,
    pub cheeks: f64,
}

impl Default for HeadShape {
    fn default() -> Self {
        Self {
            width: 0.78,
            height: 1.0,
            depth: 0.9,
            nose: 0.16,
            chin: 0.06,
            brow: 0.05,
            eye_socket: 0.035,
            ears: 0.07,
            cheeks: 0.03,
        }
    }
}

impl HeadShape {
    /// A different individual for use as a template: every parameter of the
    /// default head perturbed by 3%, alternating in sign.
    pub fn template() -> Self {
        Self::default().perturbed(0.03)
    }

    /// Multiply the parameters by `1 + f`, `1 - f`, `1 + f`, ... in field order.
    pub fn perturbed(&self, f: f64) -> Self {
        let k = |i: usize| if i % 2 == 0 { 1.0 + f } else { 1.0 - f };
        Self {
            width: self.width * k(0),
            height: self.height * k(1),
            depth: self.depth * k(2),
            nose: self.nose * k(3),
            chin: self.chin * k(4),
            brow: self.brow * k(5),
            eye_socket: self.eye_socket * k(6),
            ears: self.ears * k(7),
            cheeks: self.cheeks * k(8),
        }
    }

    fn bump(d: &Vector3<f64>, center: Vector3<f64>, amp: f64, width: f64) -> f64 {
        amp * (-(d - center.normalize()).norm_squared() / (2.0 * width * width)).exp()
    }

    /// Radial distance of the surface along unit direction `d`.
    pub fn radius(&self, d: &Vector3<f64>) -> f64 {
        let e = ((d.x / self.width).powi(2) + (d.y / self.height).powi(2) + (d.z / self.depth).powi(2))
            .sqrt()
            .recip();
        let v = Vector3::new;
        let mut s = Self::bump(d, v(0.0, -0.08, 1.0), self.nose, 0.11)
            + Self::bump(d, v(0.0, -0.8, 0.6), self.chin, 0.2);
        for side in [-1.0, 1.0] {
            s += Self::bump(d, v(0.3 * side, 0.28, 0.9), self.brow, 0.14)
                - Self::bump(d, v(0.3 * side, 0.12, 0.94), self.eye_socket, 0.09)
                + Self::bump(d, v(side, 0.0, -0.05), self.ears, 0.13)
                + Self::bump(d, v(0.45 * side, -0.25, 0.85), self.cheeks, 0.16);
        }
        e * (1.0 + s)
    }
}

/// Landmark directions in model space: eye corners (outer/inner, left to
/// right in the frontal image), nose tip, mouth corners.
fn fiducial_directions() -> [Vector3<f64>; 7] {
    let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z).normalize();
    [
        v(-0.45, 0.12, 0.88),
        v(-0.16, 0.12, 0.97),
        v(0.16, 0.12, 0.97),
        v(0.45, 0.12, 0.88),
        v(0.0, -0.08, 1.0),
        v(-0.2, -0.42, 0.88),
        v(0.2, -0.42, 0.88),
    ]
}

/// Star-shaped head on a latitude/longitude grid, in model coordinates,
/// with its seven landmark vertices.
pub fn procedural_head(shape: &HeadShape, lat: usize, lon: usize) -> (HeadMesh, [usize; 7]) {
    assert!(lat >= 3 && lon >= 3);
    let dir = |i: usize, j: usize| {
        // polar angle from +y, azimuth around y starting at +z
        let theta = std::f64::consts::PI * i as f64 / lat as f64;
        let phi = std::f64::consts::TAU * j as f64 / lon as f64;
        Vector3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos())
    };
    let mut vertices = vec![];
    let mut dirs = vec![];
    let mut push = |d: Vector3<f64>| {
        vertices.push(Point3::from(d * shape.radius(&d)));
        dirs.push(d);
    };
    push(Vector3::y());
    for i in 1..lat {
        for j in 0..lon {
            push(dir(i, j));
        }
    }
    push(-Vector3::y());
    let ring = |i: usize, j: usize| 1 + (i - 1) * lon + (j % lon);
    let bottom = vertices.len() - 1;
    let mut faces = vec![];
    for j in 0..lon {
        faces.push([0, ring(1, j + 1), ring(1, j)]);
        faces.push([bottom, ring(lat - 1, j), ring(lat - 1, j + 1)]);
    }
    for i in 1..lat - 1 {
        for j in 0..lon {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    let fiducials = fiducial_directions().map(|f| {
        (0..dirs.len())
            .max_by(|&a, &b| dirs[a].dot(&f).total_cmp(&dirs[b].dot(&f)))
            .unwrap()
    });
    let mut mesh = HeadMesh::new(vertices, faces, 0);
    mesh.orient_outward();
    (mesh, fiducials)
}

/// Map a model-frame mesh (y up, z forward) into the world frame of an
/// image: centered, y flipped, scaled so every yaw fits within `fill` of
/// the frame.
pub fn fit_to_image(mesh: &HeadMesh, (w, h): (usize, usize), fill: f64) -> Result<HeadMesh> {
    let (lo, hi) = mesh
        .bounding_box()
        .ok_or_else(|| Error::InvalidMesh("empty mesh".into()))?;
    let c = nalgebra::center(&lo, &hi);
    let r_xz = mesh
        .vertices
        .iter()
        .map(|v| ((v.x - c.x).powi(2) + (v.z - c.z).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let half_y = 0.5 * (hi.y - lo.y);
    if !(r_xz > 0.0 && half_y > 0.0) {
        return Err(Error::InvalidMesh("mesh has no extent".into()));
    }
    let s = fill * (0.5 * w as f64 / r_xz).min(0.5 * h as f64 / half_y);
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        *v = Point3::new((v.x - c.x) * s, -(v.y - c.y) * s, (v.z - c.z) * s);
    }
    out.orient_outward();
    Ok(out)
}

/// Options of the self-contained synthetic head scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSceneOptions {
    pub image_size: (usize, usize),
    pub lights: usize,
    pub poses: Vec<f64>,
    pub seed: u64,
    pub ambient: f64,
    pub intensity: f64,
    pub albedo: f64,
    pub fill: f64,
    /// Mesh resolution (latitude rings, longitude segments).
    pub tessellation: (usize, usize),
    pub lights_per_pose: BTreeMap<i32, usize>,
}

impl Default for HeadSceneOptions {
    fn default() -> Self {
        Self {
            image_size: (160, 160),
            lights: 100,
            poses: CLUSTER_BINS.iter().map(|&b| b as f64).collect(),
            seed: 7,
            ambient: 0.2,
            intensity: 0.8,
            albedo: 0.8,
            fill: 0.85,
            tessellation: (120, 240),
            lights_per_pose: BTreeMap::new(),
        }
    }
}

impl HeadSceneOptions {
    /// Uneven per-view photo counts shaped like a real celebrity collection
    /// (most photos frontal, few at steep angles), used for the ablation.
    pub fn uneven() -> Self {
        let counts = [(-90, 185), (-60, 62), (-30, 118), (0, 371), (30, 113), (60, 80), (90, 191)];
        Self {
            lights: 371,
            lights_per_pose: counts.into_iter().collect(),
            ..Self::default()
        }
    }
}

/// The procedural head (and a differently shaped template) as a scene.
pub fn head_scene(opts: &HeadSceneOptions) -> Result<SyntheticScene> {
    let (lat, lon) = opts.tessellation;
    let (model, fid) = procedural_head(&HeadShape::default(), lat, lon);
    scene_with_model(&model, fid, opts)
}

/// A scene around a user-supplied model-frame mesh (y up, z toward the
/// frontal viewer). Landmarks are the vertices along the standard landmark
/// directions from the bounding-box center.
pub fn mesh_scene(model: &HeadMesh, opts: &HeadSceneOptions) -> Result<SyntheticScene> {
    model.validate()?;
    scene_with_model(model, landmark_vertices(model)?, opts)
}

fn scene_with_model(model: &HeadMesh, fid: [usize; 7], opts: &HeadSceneOptions) -> Result<SyntheticScene> {
    let (lat, lon) = opts.tessellation;
    let (tmodel, tfid) = procedural_head(&HeadShape::template(), lat, lon);
    let scene = SyntheticScene {
        mesh: fit_to_image(model, opts.image_size, opts.fill)?,
        albedo: Albedo::Uniform(opts.albedo),
        lights: sample_lights(opts.lights, opts.seed, opts.ambient, opts.intensity),
        poses: opts.poses.clone(),
        image_size: opts.image_size,
        fiducial_vertices: fid,
        lights_per_pose: opts.lights_per_pose.clone(),
        template: Some((fit_to_image(&tmodel, opts.image_size, opts.fill)?, tfid)),
        seed: opts.seed,
    };
    scene.validate()?;
    Ok(scene)
}

/// Vertices best aligned with the landmark directions, seen from the
/// bounding-box center of a model-frame mesh.
pub fn landmark_vertices(model: &HeadMesh) -> Result<[usize; 7]> {
    let (lo, hi) = model
        .bounding_box()
        .ok_or_else(|| Error::InvalidMesh("empty mesh".into()))?;
    let c = nalgebra::center(&lo, &hi);
    let dirs: Vec<Vector3<f64>> = model
        .vertices
        .iter()
        .map(|v| (v - c).try_normalize(1e-12).unwrap_or_else(Vector3::zeros))
        .collect();
    Ok(fiducial_directions().map(|f| {
        (0..dirs.len())
            .max_by(|&a, &b| dirs[a].dot(&f).total_cmp(&dirs[b].dot(&f)).then(b.cmp(&a)))
            .unwrap()
    }))
}

/// The first `n` canonical azimuths, nearest the frontal view first.
pub fn canonical_poses(n: usize) -> Vec<f64> {
    let mut bins = CLUSTER_BINS.to_vec();
    bins.sort_by_key(|b| (b.abs(), -b.signum()));
    let mut out: Vec<f64> = bins.into_iter().take(n).map(f64::from).collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Frontal template normals warped so the template's landmarks land on
/// `target` (the frontal reference layout).
pub fn template_normals(scene: &SyntheticScene, target: &Fiducials) -> Result<Option<NormalField>> {
    let Some((mesh, fid)) = &scene.template else {
        return Ok(None);
    };
    let geo = render_geometry(mesh, &Albedo::Uniform(1.0), fid, scene.image_size, 0.0)?;
    let t = fit_similarity(&geo.fiducials, target)?;
    let inv = t.inverse();
    let (w, h) = scene.image_size;
    let src = &geo.normals;
    let warped = Grid::from_fn(w, h, |x, y| {
        let p = inv.apply(Point2::new(x as f64, y as f64));
        let (x0, y0) = (p.x.floor(), p.y.floor());
        if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (w - 1) as f64 || y0 + 1.0 > (h - 1) as f64 {
            return None;
        }
        let (fx, fy) = (p.x - x0, p.y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let mut acc = Vector3::zeros();
        for (dx, dy, wt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            acc += src.get(x0 + dx, y0 + dy).as_ref()? * wt;
        }
        let n = acc.norm();
        (n > 1e-9).then(|| acc / n)
    });
    Ok(Some(NormalField::from_normals(&warped)))
}

/// A rendered collection held in memory, with per-pose ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub clusters: ClusterSet,
    pub truth: BTreeMap<i32, PoseRender>,
}

/// Render every (pose, light) photo and assemble the cluster set the same
/// way loading the written dataset would.
pub fn render_dataset(scene: &SyntheticScene) -> Result<SyntheticData> {
    scene.validate()?;
    let mut photos = Vec::with_capacity(scene.photo_count());
    let mut truth = BTreeMap::new();
    let mut references = BTreeMap::new();
    for &pose in &scene.poses {
        let geo = PoseRender::new(scene, pose)?;
        let rendered: Vec<Photo> = scene
            .lights_for_pose(pose)
            .par_iter()
            .enumerate()
            .map(|(i, l)| geo.photo(photo_id(pose, i), l))
            .collect::<Result<_>>()?;
        photos.extend(rendered);
        references.insert(pose.round() as i32, geo.fiducials);
        truth.insert(pose.round() as i32, geo);
    }
    let template = match truth.get(&0) {
        Some(front) => template_normals(scene, &front.fiducials)?,
        None => None,
    };
    let mut clusters = ClusterSet::from_photos(photos, &references, template)?;
    for (id, c) in clusters.clusters.iter_mut() {
        if let Some(geo) = truth.get(id) {
            c.face_mask = Some(face_mask(geo));
        }
    }
    Ok(SyntheticData { clusters, truth })
}

/// Camera-facing part of the head at a pose.
pub fn face_mask(geo: &PoseRender) -> Mask {
    geo.normals.map(|n| n.is_some_and(|n| n.z > FACE_MIN_NZ))
}

/// Minimum camera-facing component for a pixel to count as face region.
pub const FACE_MIN_NZ: f64 = 0.3;

fn save_gray(grid: &Grid<f64>, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(
        grid.width() as u32,
        grid.height() as u32,
        grid.iter().map(|&v| quantize(v) as u8).collect(),
    )
    .expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    save_gray(&mask.map(|&m| if m { 255.0 } else { 0.0 }), path)
}

/// Write every (pose, light) photo, masks, ground truth and a manifest under
/// `out_dir`. Returns the manifest path.
pub fn make_dataset(scene: &SyntheticScene, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    scene.validate()?;
    let out = out_dir.as_ref();
    for sub in ["photos", "masks", "gt"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let mut manifest = Manifest::default();
    let mut frontal_fiducials = None;
    for &pose in &scene.poses {
        let geo = PoseRender::new(scene, pose)?;
        let tag = pose_tag(pose);
        let cluster = pose.round() as i32;
        let mask_file = format!("masks/{tag}_head.png");
        let face_file = format!("masks/{tag}_face.png");
        let normals_file = format!("gt/{tag}_normals.hgf");
        let depth_file = format!("gt/{tag}_depth.hgf");
        save_mask(&geo.mask(), &out.join(&mask_file))?;
        save_mask(&face_mask(&geo), &out.join(&face_file))?;
        geo.gt_normals().save_hgf(out.join(&normals_file))?;
        geo.gt_depth().to_hgf().save(out.join(&depth_file))?;
        let lights = scene.lights_for_pose(pose);
        let entries: Vec<PhotoEntry> = lights
            .par_iter()
            .enumerate()
            .map(|(i, light)| {
                let file = format!("photos/{}.png", photo_id(pose, i));
                save_gray(&geo.shade(light), &out.join(&file))?;
                Ok(PhotoEntry {
                    id: Some(photo_id(pose, i)),
                    file,
                    azimuth: pose,
                    fiducials: fiducials_to_array(&geo.fiducials),
                    mask: Some(mask_file.clone()),
                    light: Some(*light),
                    gt_normals: Some(normals_file.clone()),
                    gt_depth: Some(depth_file.clone()),
                })
            })
            .collect::<Result<_>>()?;
        manifest.photos.extend(entries);
        manifest.reference_fiducials.insert(cluster, fiducials_to_array(&geo.fiducials));
        manifest.face_masks.insert(cluster, face_file);
        if cluster == 0 {
            frontal_fiducials = Some(geo.fiducials);
        }
    }
    if let Some(target) = frontal_fiducials {
        if let Some(t) = template_normals(scene, &target)? {
            t.save_hgf(out.join("gt/template_normals.hgf"))?;
            manifest.template_normals_file = Some("gt/template_normals.hgf".into());
        }
    }
    scene.mesh.save_ply(out.join("gt/mesh.ply"))?;
    manifest.ground_truth = Some(GroundTruth {
        mesh_file: "gt/mesh.ply".into(),
        albedo: scene.albedo.mean(),
        seed: scene.seed,
    });
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sphere of radius `r` pixels centered in a `size` image.
    pub(crate) fn sphere_scene(size: usize, r: f64, lights: Vec<Light>) -> SyntheticScene {
        let (model, _) = procedural_head(
            &HeadShape {
                width: 1.0,
                height: 1.0,
                depth: 1.0,
                nose: 0.0,
                chin: 0.0,
                brow: 0.0,
                eye_socket: 0.0,
                ears: 0.0,
                cheeks: 0.0,
            },
            160,
            320,
        );
        let mut mesh = model;
        for v in &mut mesh.vertices {
            *v = Point3::new(v.x * r, -v.y * r, v.z * r);
        }
        mesh.orient_outward();
        let fid = [0, 1, 2, 3, 4, 5, 6].map(|k| 1 + k * 40 + 50 * 320);
        SyntheticScene {
            mesh,
            albedo: Albedo::Uniform(1.0),
            lights,
            poses: vec![0.0],
            image_size: (size, size),
            fiducial_vertices: fid,
            lights_per_pose: BTreeMap::new(),
            template: None,
            seed: 0,
        }
    }

    fn light(d: [f64; 3], intensity: f64, ambient: f64) -> Light {
        Light {
            direction: d,
            intensity,
            ambient,
        }
    }

    #[test]
    fn head_on_light_follows_lambert() {
        let scene = sphere_scene(65, 28.0, vec![light([0.0, 0.0, 1.0], 1.0, 0.0)]);
        let geo = PoseRender::new(&scene, 0.0).unwrap();
        let img = geo.radiance(&scene.lights[0]);
        assert!((img.get(32, 32) - 255.0).abs() < 0.5);
        for (i, n) in geo.normals.iter().enumerate() {
            if let Some(n) = n {
                assert!((img.as_slice()[i] - 255.0 * n.z.max(0.0)).abs() < 1e-9);
                assert!((n.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ambient_only_light_is_flat() {
        let scene = sphere_scene(49, 20.0, vec![light([1.0, 0.0, 0.0], 0.0, 0.3)]);
        let r = render_lambertian(&scene, 0.0, 0).unwrap();
        let expected = quantize(255.0 * 0.3);
        for (v, &m) in r.photo.pixels.iter().zip(r.photo.mask.iter()) {
            if m {
                assert_eq!(*v, expected);
            }
        }
    }

    #[test]
    fn sphere_depth_is_analytic() {
        let r = 28.0;
        let scene = sphere_scene(65, r, vec![light([0.0, 0.0, 1.0], 1.0, 0.0)]);
        let out = render_lambertian(&scene, 0.0, 0).unwrap();
        assert!((out.gt_depth.get(32, 32).unwrap() - r).abs() < 0.5);
        for y in 0..65 {
            for x in 0..65 {
                if let Some(z) = out.gt_depth.get(x, y) {
                    let (dx, dy) = (x as f64 - 32.0, y as f64 - 32.0);
                    let analytic = (r * r - dx * dx - dy * dy).max(0.0).sqrt();
                    assert!((z - analytic).abs() < 0.5, "({x},{y}) {z} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn empty_projection() {
        let mut scene = sphere_scene(40, 10.0, vec![light([0.0, 0.0, 1.0], 1.0, 0.0)]);
        for v in &mut scene.mesh.vertices {
            v.x += 1000.0;
        }
        assert!(matches!(render_lambertian(&scene, 0.0, 0), Err(Error::EmptyProjection)));
    }

    #[test]
    fn non_canonical_pose_rejected() {
        let mut scene = sphere_scene(40, 10.0, vec![light([0.0, 0.0, 1.0], 1.0, 0.0)]);
        scene.poses = vec![45.0];
        assert!(scene.validate().is_err());
    }

    #[test]
    fn sampled_lights_are_front_facing_units() {
        let lights = sample_lights(500, 3, 0.2, 0.8);
        for l in &lights {
            let d = Vector3::from(l.direction);
            assert!((d.norm() - 1.0).abs() < 1e-12 && d.z > 0.2);
        }
        assert_eq!(lights, sample_lights(500, 3, 0.2, 0.8));
        assert_ne!(lights, sample_lights(500, 4, 0.2, 0.8));
    }

    #[test]
    fn procedural_head_is_closed_and_outward() {
        let (mesh, fid) = procedural_head(&HeadShape::default(), 24, 48);
        mesh.validate().unwrap();
        assert!(mesh.signed_volume() > 0.0);
        let mut edges = BTreeMap::new();
        for f in &mesh.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2), "mesh must be watertight");
        // nose tip is the most forward landmark
        let z = fid.map(|v| mesh.vertices[v].z);
        assert!(z.iter().all(|&v| v <= z[4]));
    }

    #[test]
    fn canonical_pose_prefixes() {
        assert_eq!(canonical_poses(1), vec![0.0]);
        assert_eq!(canonical_poses(3), vec![-30.0, 0.0, 30.0]);
        assert_eq!(canonical_poses(7).len(), 7);
        assert_eq!(canonical_poses(20).len(), 7);
    }

    #[test]
    fn landmarks_of_a_procedural_head_match_its_own() {
        let (mesh, fid) = procedural_head(&HeadShape::default(), 24, 48);
        let found = landmark_vertices(&mesh).unwrap();
        // bounding-box center differs from the model origin, so allow neighbors
        for (a, b) in found.iter().zip(&fid) {
            assert!((mesh.vertices[*a] - mesh.vertices[*b]).norm() < 0.15);
        }
    }
}
