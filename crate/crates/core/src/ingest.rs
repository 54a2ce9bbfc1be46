//! Photo collections: loading, azimuth clustering, fiducial alignment and
//! cluster averages.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::Point2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{fit_similarity, rms_distance, Similarity2};
use crate::grid::{Grid, Mask};
use crate::manifest::{resolve, Light, Manifest, PhotoEntry};
use crate::photometric::NormalField;

/// The seven azimuth bins, in degrees.
pub const CLUSTER_BINS: [i32; 7] = [-90, -60, -30, 0, 30, 60, 90];

/// Fraction of photos that must cover a pixel for the average to be valid.
pub const AVERAGE_MIN_COVERAGE: f64 = 0.25;

pub type Fiducials = [Point2<f64>; 7];

#[derive(Debug, Clone, PartialEq)]
pub struct Photo {
    pub id: String,
    pub pixels: Grid<f64>,
    pub mask: Mask,
    pub fiducials: Fiducials,
    pub azimuth: f64,
    /// Ground-truth light when the photo was rendered.
    pub light: Option<Light>,
}

impl Photo {
    pub fn new(
        id: impl Into<String>,
        pixels: Grid<f64>,
        mask: Mask,
        fiducials: Fiducials,
        azimuth: f64,
    ) -> Result<Self> {
        let photo = Self {
            id: id.into(),
            pixels,
            mask,
            fiducials,
            azimuth,
            light: None,
        };
        photo.validate()?;
        Ok(photo)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidPhoto {
            id: self.id.clone(),
            reason,
        };
        if !self.pixels.same_dims(&self.mask) {
            return Err(invalid(format!(
                "pixels are {:?} but mask is {:?}",
                self.pixels.dims(),
                self.mask.dims()
            )));
        }
        if !(-180.0..180.0).contains(&self.azimuth) {
            return Err(invalid(format!("azimuth {} outside [-180, 180)", self.azimuth)));
        }
        let (w, h) = (self.pixels.width() as f64, self.pixels.height() as f64);
        for (i, f) in self.fiducials.iter().enumerate() {
            if !(f.x >= 0.0 && f.y >= 0.0 && f.x <= w - 1.0 && f.y <= h - 1.0) {
                return Err(invalid(format!("fiducial {i} at ({}, {}) is outside the image", f.x, f.y)));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Nearest azimuth bin; ties go to the bin with the smaller magnitude and
/// anything past +-90 lands in the +-90 bin.
pub fn assign_cluster(azimuth: f64) -> i32 {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    // Bins are visited in order of increasing magnitude so that a strict
    // comparison resolves ties toward the smaller bin.
    for bin in [0, -30, 30, -60, 60, -90, 90] {
        let d = (azimuth - bin as f64).abs();
        if d < best_dist {
            best = bin;
            best_dist = d;
        }
    }
    best
}

/// The neighbor a cluster grows from: one bin closer to the frontal view.
pub fn inner_neighbor(cluster: i32) -> Option<i32> {
    match cluster {
        0 => None,
        c if c > 0 => Some(c - 30),
        c => Some(c + 30),
    }
}

/// Result of aligning one photo to a reference fiducial layout.
#[derive(Debug, Clone)]
pub struct Aligned {
    pub photo: Photo,
    /// Maps original image coordinates to aligned coordinates.
    pub transform: Similarity2,
    /// RMS distance of the warped fiducials to the reference.
    pub residual_rms: f64,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Warp a photo by the least-squares similarity taking its fiducials onto
/// `reference`, into a frame of the same size as the photo.
pub fn rigid_align(photo: &Photo, reference: &Fiducials) -> Result<Aligned> {
    rigid_align_into(photo, reference, photo.pixels.dims())
}

/// As [`rigid_align`] but resampled into a `frame = (width, height)` grid.
pub fn rigid_align_into(photo: &Photo, reference: &Fiducials, frame: (usize, usize)) -> Result<Aligned> {
    let transform = fit_similarity(&photo.fiducials, reference)?;
    let inv = transform.inverse();
    let (w, h) = frame;
    let src_w = photo.width() as f64;
    let src_h = photo.height() as f64;
    let mask_f = photo.mask.map(|&m| if m { 1.0 } else { 0.0 });
    let mut pixels = Grid::filled(w, h, 0.0);
    let mut mask = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let p = inv.apply(Point2::new(x as f64, y as f64));
            let (sx, sy) = (snap(p.x), snap(p.y));
            if sx < 0.0 || sy < 0.0 || sx > src_w - 1.0 || sy > src_h - 1.0 {
                continue;
            }
            let m = mask_f.sample_bilinear(sx, sy).unwrap_or(0.0);
            if m >= 0.5 {
                mask.set(x, y, true);
                pixels.set(x, y, photo.pixels.sample_bilinear(sx, sy).unwrap_or(0.0));
            }
        }
    }
    let fiducials = photo.fiducials.map(|f| transform.apply(f));
    let residual_rms = rms_distance(&fiducials, reference);
    Ok(Aligned {
        photo: Photo {
            id: photo.id.clone(),
            pixels,
            mask,
            fiducials,
            azimuth: photo.azimuth,
            light: photo.light,
        },
        transform,
        residual_rms,
    })
}

/// Per-pixel mean of the unmasked photos.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageImage {
    pub values: Grid<f64>,
    /// Pixels covered by at least a quarter of the photos.
    pub valid: Mask,
    /// Number of photos covering each pixel.
    pub counts: Grid<u32>,
}

pub fn average_photos(photos: &[Photo]) -> Option<AverageImage> {
    let first = photos.first()?;
    let (w, h) = first.pixels.dims();
    let mut sums = Grid::filled(w, h, 0.0f64);
    let mut counts = Grid::filled(w, h, 0u32);
    for p in photos {
        assert!(p.pixels.same_dims(&sums), "photos in a cluster must share dimensions");
        for ((s, c), (&v, &m)) in sums
            .as_mut_slice()
            .iter_mut()
            .zip(counts.as_mut_slice().iter_mut())
            .zip(p.pixels.iter().zip(p.mask.iter()))
        {
            if m {
                *s += v;
                *c += 1;
            }
        }
    }
    let n = photos.len() as f64;
    let values = Grid::from_fn(w, h, |x, y| {
        let c = *counts.get(x, y);
        if c > 0 {
            sums.get(x, y) / c as f64
        } else {
            0.0
        }
    });
    let valid = counts.map(|&c| c as f64 >= AVERAGE_MIN_COVERAGE * n && c > 0);
    Some(AverageImage {
        values,
        valid,
        counts,
    })
}

#[derive(Debug, Clone)]
pub struct PhotoCluster {
    pub cluster_id: i32,
    /// Photos warped to the cluster frame.
    pub photos: Vec<Photo>,
    pub reference_fiducials: Fiducials,
    pub average: AverageImage,
    /// Factorization region for this cluster, if one was configured.
    pub face_mask: Option<Mask>,
    /// Alignment residual (RMS px) of every photo.
    pub alignment_rms: Vec<f64>,
}

impl PhotoCluster {
    /// Align raw photos to `reference` and average them.
    pub fn build(cluster_id: i32, raw: &[Photo], reference: Fiducials) -> Result<Self> {
        let first = raw.first().ok_or(Error::EmptyCluster(cluster_id))?;
        let frame = first.pixels.dims();
        let aligned: Vec<Aligned> = raw
            .par_iter()
            .map(|p| rigid_align_into(p, &reference, frame))
            .collect::<Result<_>>()?;
        let alignment_rms = aligned.iter().map(|a| a.residual_rms).collect();
        let photos: Vec<Photo> = aligned.into_iter().map(|a| a.photo).collect();
        let average = average_photos(&photos).ok_or(Error::EmptyCluster(cluster_id))?;
        Ok(Self {
            cluster_id,
            photos,
            reference_fiducials: reference,
            average,
            face_mask: None,
            alignment_rms,
        })
    }

    pub fn len(&self) -> usize {
        self.photos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photos.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.average.values.dims()
    }

    /// Cluster with a subset of photos (by index), re-averaged.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let photos: Vec<Photo> = indices.iter().map(|&i| self.photos[i].clone()).collect();
        let alignment_rms = indices.iter().map(|&i| self.alignment_rms[i]).collect();
        let average = match average_photos(&photos) {
            Some(a) => a,
            None => AverageImage {
                values: Grid::filled(self.dims().0, self.dims().1, 0.0),
                valid: Grid::filled(self.dims().0, self.dims().1, false),
                counts: Grid::filled(self.dims().0, self.dims().1, 0),
            },
        };
        Ok(Self {
            cluster_id: self.cluster_id,
            photos,
            reference_fiducials: self.reference_fiducials,
            average,
            face_mask: self.face_mask.clone(),
            alignment_rms,
        })
    }
}

/// Mean image of a cluster's aligned photos.
pub fn cluster_average(cluster: &PhotoCluster) -> Result<AverageImage> {
    average_photos(&cluster.photos).ok_or(Error::EmptyCluster(cluster.cluster_id))
}

#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub clusters: BTreeMap<i32, PhotoCluster>,
    /// Frontal normals of a different individual, used to fix the frontal
    /// factorization ambiguity.
    pub template_normals: Option<NormalField>,
}

impl ClusterSet {
    pub fn counts(&self) -> BTreeMap<i32, usize> {
        self.clusters.iter().map(|(&k, c)| (k, c.len())).collect()
    }

    pub fn total_photos(&self) -> usize {
        self.clusters.values().map(PhotoCluster::len).sum()
    }

    pub fn get(&self, cluster: i32) -> Result<&PhotoCluster> {
        self.clusters.get(&cluster).ok_or(Error::UnknownCluster(cluster))
    }

    /// Group raw photos by azimuth bin and align each group. Reference
    /// layouts default to the per-cluster mean of the raw fiducials.
    pub fn from_photos(
        photos: Vec<Photo>,
        references: &BTreeMap<i32, Fiducials>,
        template_normals: Option<NormalField>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &photos {
            if !seen.insert(p.id.clone()) {
                return Err(Error::ManifestParse(format!("duplicate photo id {}", p.id)));
            }
        }
        let mut groups: BTreeMap<i32, Vec<Photo>> = BTreeMap::new();
        for p in photos {
            groups.entry(assign_cluster(p.azimuth)).or_default().push(p);
        }
        if !groups.contains_key(&0) {
            return Err(Error::MissingFrontalCluster);
        }
        let mut clusters = BTreeMap::new();
        for (id, raw) in groups {
            let reference = references
                .get(&id)
                .copied()
                .unwrap_or_else(|| mean_fiducials(&raw));
            clusters.insert(id, PhotoCluster::build(id, &raw, reference)?);
        }
        Ok(Self {
            clusters,
            template_normals,
        })
    }
}

pub fn mean_fiducials(photos: &[Photo]) -> Fiducials {
    let n = photos.len().max(1) as f64;
    let mut out = [Point2::origin(); 7];
    for (i, o) in out.iter_mut().enumerate() {
        let (sx, sy) = photos
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.fiducials[i].x, sy + p.fiducials[i].y));
        *o = Point2::new(sx / n, sy / n);
    }
    out
}

pub fn fiducials_from_array(a: &[[f64; 2]; 7]) -> Fiducials {
    a.map(|[x, y]| Point2::new(x, y))
}

pub fn fiducials_to_array(f: &Fiducials) -> [[f64; 2]; 7] {
    f.map(|p| [p.x, p.y])
}

pub fn load_gray(path: &Path) -> Result<Grid<f64>> {
    if !path.exists() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_vec(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(f64::from).collect(),
    ))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    Ok(load_gray(path)?.map(|&v| v >= 128.0))
}

fn load_entry(base: &Path, entry: &PhotoEntry) -> Result<Photo> {
    let pixels = load_gray(&resolve(base, &entry.file))?;
    let mask = match &entry.mask {
        Some(m) => load_mask(&resolve(base, m))?,
        None => Grid::filled(pixels.width(), pixels.height(), true),
    };
    let mut photo = Photo::new(
        entry.photo_id(),
        pixels,
        mask,
        fiducials_from_array(&entry.fiducials),
        entry.azimuth,
    )?;
    photo.light = entry.light;
    Ok(photo)
}

/// Load every photo a manifest lists, in manifest order.
pub fn load_photos(manifest: &Manifest, base: &Path) -> Result<Vec<Photo>> {
    manifest
        .photos
        .par_iter()
        .map(|e| load_entry(base, e))
        .collect()
}

/// Load, cluster, align and average a collection described by a manifest.
pub fn load_collection(manifest_path: impl AsRef<Path>) -> Result<ClusterSet> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    collection_from_manifest(&manifest, base)
}

pub fn collection_from_manifest(manifest: &Manifest, base: &Path) -> Result<ClusterSet> {
    if manifest.photos.is_empty() {
        return Err(Error::MissingFrontalCluster);
    }
    let photos = load_photos(manifest, base)?;
    let references: BTreeMap<i32, Fiducials> = manifest
        .reference_fiducials
        .iter()
        .map(|(&k, v)| (k, fiducials_from_array(v)))
        .collect();
    let template = match &manifest.template_normals_file {
        Some(f) => Some(NormalField::load_hgf(resolve(base, f))?),
        None => None,
    };
    let mut set = ClusterSet::from_photos(photos, &references, template)?;
    for (id, file) in &manifest.face_masks {
        if let Some(c) = set.clusters.get_mut(id) {
            let mask = load_mask(&resolve(base, file))?;
            if mask.dims() != c.dims() {
                return Err(Error::ManifestParse(format!(
                    "face mask for cluster {id} has the wrong size"
                )));
            }
            c.face_mask = Some(mask);
        }
    }
    Ok(set)
}
