//! Uncalibrated photometric stereo for one view cluster.
//!
//! Intensities of `n` photos over `p` pixels form an `n x p` matrix that a
//! Lambertian surface with ambient light explains with rank 4: every photo
//! has a lighting vector `[ambient, x, y, z]` and every pixel a raw vector
//! `albedo * [1, nx, ny, nz]`. The factorization recovers both up to an
//! invertible 4x4 transform, resolved later against reference normals.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::hgf::FloatImage;
use crate::ingest::PhotoCluster;

/// Minimum photos for a rank-4 factorization.
pub const MIN_PHOTOS: usize = 4;

/// Per-pixel normals, albedo and the raw 4-vectors they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub normals: Grid<Vector3<f64>>,
    pub albedo: Grid<f64>,
    pub valid: Mask,
    pub raw4: Grid<Vector4<f64>>,
}

impl NormalField {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            normals: Grid::filled(width, height, Vector3::z()),
            albedo: Grid::filled(width, height, 0.0),
            valid: Grid::filled(width, height, false),
            raw4: Grid::filled(width, height, Vector4::zeros()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.valid.dims()
    }

    /// Field from raw 4-vectors; pixels whose normal part vanishes are
    /// marked invalid.
    pub fn from_raw4(raw4: Grid<Vector4<f64>>, valid: &Mask) -> Self {
        let (w, h) = raw4.dims();
        let mut field = Self::empty(w, h);
        for i in 0..raw4.len() {
            let m = raw4.as_slice()[i];
            let n = Vector3::new(m[1], m[2], m[3]);
            let len = n.norm();
            if valid.as_slice()[i] && len > 1e-300 && len.is_finite() {
                field.normals.as_mut_slice()[i] = n / len;
                field.albedo.as_mut_slice()[i] = len;
                field.valid.as_mut_slice()[i] = true;
            }
        }
        field.raw4 = raw4;
        field
    }

    /// Geometry-only field: raw vectors are `[1, n]` (unit albedo and
    /// ambient), the convention used for reference normals.
    pub fn from_normals(normals: &Grid<Option<Vector3<f64>>>) -> Self {
        let (w, h) = normals.dims();
        let mut field = Self::empty(w, h);
        for (i, n) in normals.iter().enumerate() {
            if let Some(n) = n {
                let len = n.norm();
                if len > 1e-300 && len.is_finite() {
                    let u = n / len;
                    field.normals.as_mut_slice()[i] = u;
                    field.albedo.as_mut_slice()[i] = 1.0;
                    field.valid.as_mut_slice()[i] = true;
                    field.raw4.as_mut_slice()[i] = Vector4::new(1.0, u.x, u.y, u.z);
                }
            }
        }
        field
    }

    pub fn valid_count(&self) -> usize {
        self.valid.count()
    }

    pub fn to_hgf(&self) -> FloatImage {
        let (w, h) = self.dims();
        FloatImage::from_fn::<3>(w, h, |x, y| {
            self.valid.get(x, y).then(|| {
                let n = self.normals.get(x, y);
                [n.x, n.y, n.z]
            })
        })
    }

    pub fn save_hgf(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_hgf().save(path)
    }

    /// Load a 3-channel normal map as a geometry-only field.
    pub fn load_hgf(path: impl AsRef<Path>) -> Result<Self> {
        let img = FloatImage::load(path)?;
        let grid = img.to_grid::<3>()?;
        Ok(Self::from_normals(&grid.map(|v| v.map(|[x, y, z]| Vector3::new(x, y, z)))))
    }
}

/// Which mask produced the matrix columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Face,
    Head,
}

/// Photo intensities over a pixel region, one row per photo.
#[derive(Debug, Clone)]
pub struct IntensityMatrix {
    pub values: DMatrix<f64>,
    /// Whether each entry was unmasked in its photo.
    pub covered: DMatrix<bool>,
    pub pixel_index: Vec<(usize, usize)>,
    pub photo_ids: Vec<String>,
    pub region: Region,
}

impl IntensityMatrix {
    pub fn n_photos(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.values.ncols()
    }

    /// Values with every uncovered entry replaced by its column's covered mean.
    pub fn imputed(&self) -> DMatrix<f64> {
        let mut q = self.values.clone();
        for j in 0..q.ncols() {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..q.nrows() {
                if self.covered[(i, j)] {
                    sum += q[(i, j)];
                    count += 1;
                }
            }
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            for i in 0..q.nrows() {
                if !self.covered[(i, j)] {
                    q[(i, j)] = mean;
                }
            }
        }
        q
    }
}

/// Arrange the cluster's intensities over `region` into a matrix. Pixels
/// that no photo covers are left out.
pub fn build_intensity_matrix(cluster: &PhotoCluster, region: &Mask, kind: Region) -> Result<IntensityMatrix> {
    let n = cluster.photos.len();
    if n < MIN_PHOTOS {
        return Err(Error::TooFewPhotos {
            found: n,
            required: MIN_PHOTOS,
        });
    }
    assert_eq!(region.dims(), cluster.dims(), "region mask must match the cluster frame");
    let pixel_index: Vec<(usize, usize)> = (0..region.len())
        .map(|i| region.coords(i))
        .filter(|&(x, y)| *region.get(x, y) && cluster.photos.iter().any(|p| *p.mask.get(x, y)))
        .collect();
    let p = pixel_index.len();
    let values = DMatrix::from_fn(n, p, |i, j| {
        let (x, y) = pixel_index[j];
        let photo = &cluster.photos[i];
        if *photo.mask.get(x, y) {
            *photo.pixels.get(x, y)
        } else {
            0.0
        }
    });
    let covered = DMatrix::from_fn(n, p, |i, j| {
        let (x, y) = pixel_index[j];
        *cluster.photos[i].mask.get(x, y)
    });
    Ok(IntensityMatrix {
        values,
        covered,
        pixel_index,
        photo_ids: cluster.photos.iter().map(|p| p.id.clone()).collect(),
        region: kind,
    })
}

/// Per-photo lighting vectors `[ambient, x, y, z]` in the factorization's
/// (ambiguous) basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LightingBasis {
    pub coefficients: DMatrix<f64>,
}

impl LightingBasis {
    pub fn n_photos(&self) -> usize {
        self.coefficients.nrows()
    }

    #[inline]
    pub fn row(&self, i: usize) -> Vector4<f64> {
        Vector4::new(
            self.coefficients[(i, 0)],
            self.coefficients[(i, 1)],
            self.coefficients[(i, 2)],
            self.coefficients[(i, 3)],
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ambient,x,y,z\n");
        for i in 0..self.coefficients.nrows() {
            let r = self.row(i);
            let _ = writeln!(s, "{},{},{},{}", r[0], r[1], r[2], r[3]);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub lighting: LightingBasis,
    /// `4 x p` pixel factors matching the matrix columns.
    pub factors: DMatrix<f64>,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
}

impl Factorization {
    /// Squared Frobenius norm of the discarded spectrum.
    pub fn tail_energy(&self) -> f64 {
        self.singular_values.iter().skip(4).map(|s| s * s).sum()
    }

    /// Fraction of the imputed matrix energy the rank-4 model explains.
    pub fn captured_energy(&self) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total > 0.0 {
            1.0 - self.tail_energy() / total
        } else {
            0.0
        }
    }

    /// Factors as a raw-vector field over the matrix's pixels.
    pub fn raw_field(&self, q: &IntensityMatrix, dims: (usize, usize)) -> NormalField {
        let mut raw4 = Grid::filled(dims.0, dims.1, Vector4::zeros());
        let mut valid = Grid::filled(dims.0, dims.1, false);
        for (j, &(x, y)) in q.pixel_index.iter().enumerate() {
            raw4.set(
                x,
                y,
                Vector4::new(
                    self.factors[(0, j)],
                    self.factors[(1, j)],
                    self.factors[(2, j)],
                    self.factors[(3, j)],
                ),
            );
            valid.set(x, y, true);
        }
        NormalField::from_raw4(raw4, &valid)
    }
}

/// Relative size of the 4th singular value below which lighting is
/// considered degenerate.
pub const DEGENERATE_LIGHTING_RATIO: f64 = 1e-8;

/// Best rank-4 factorization `Q ~ L N` of the mean-imputed matrix.
///
/// Signs are fixed so that each lighting column correlates non-negatively
/// with the mean brightness of the photos.
pub fn factor_rank4(q: &IntensityMatrix) -> Result<Factorization> {
    let n = q.n_photos();
    if n < MIN_PHOTOS {
        return Err(Error::TooFewPhotos {
            found: n,
            required: MIN_PHOTOS,
        });
    }
    if q.n_pixels() < 4 {
        return Err(Error::DegenerateLighting { ratio: 0.0 });
    }
    let imputed = q.imputed();
    let svd = imputed.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let ratio = if sigma[0] > 0.0 { sigma[3] / sigma[0] } else { 0.0 };
    if !(ratio >= DEGENERATE_LIGHTING_RATIO) {
        return Err(Error::DegenerateLighting { ratio });
    }
    let row_means: Vec<f64> = (0..n).map(|i| imputed.row(i).mean()).collect();
    let p = q.n_pixels();
    let mut lighting = DMatrix::zeros(n, 4);
    let mut factors = DMatrix::zeros(4, p);
    for (c, &k) in order.iter().take(4).enumerate() {
        let mut col: Vec<f64> = (0..n).map(|i| u[(i, k)] * sigma[c]).collect();
        let corr: f64 = col.iter().zip(&row_means).map(|(a, b)| a * b).sum();
        let flip = if corr != 0.0 {
            corr < 0.0
        } else {
            // tie-break on the largest-magnitude entry
            let big = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            big < 0.0
        };
        let sign = if flip { -1.0 } else { 1.0 };
        for v in &mut col {
            *v *= sign;
        }
        for (i, v) in col.into_iter().enumerate() {
            lighting[(i, c)] = v;
        }
        for j in 0..p {
            factors[(c, j)] = vt[(k, j)] * sign;
        }
    }
    Ok(Factorization {
        lighting: LightingBasis {
            coefficients: lighting,
        },
        factors,
        singular_values: sigma,
    })
}

/// Per-pixel photo selection settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GateOptions {
    /// A photo is kept when its residual is below this multiple of the
    /// median absolute residual at the pixel.
    pub multiplier: f64,
    /// Gate-and-resolve rounds after the initial all-photo solve.
    pub iterations: usize,
    /// Mark pixels invalid when fewer than a third of the photos survive.
    pub n_over_3: bool,
}

impl Default for GateOptions {
    fn default() -> Self {
        Self {
            multiplier: 2.0,
            iterations: 1,
            n_over_3: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub field: NormalField,
    /// Photos that passed the first residual gate at each pixel.
    pub selected: Grid<u32>,
}

fn solve_subset(lighting: &LightingBasis, rows: &[usize], q: &[f64]) -> Option<Vector4<f64>> {
    let mut ata = Matrix4::zeros();
    let mut atb = Vector4::zeros();
    for &i in rows {
        let l = lighting.row(i);
        ata += l * l.transpose();
        atb += l * q[i];
    }
    let sol = ata.cholesky()?.solve(&atb);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

pub fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if values.len() % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Estimate a raw 4-vector per head pixel from a per-pixel subset of photos.
///
/// A photo participates at a pixel when the pixel lies inside its mask and
/// its residual against an initial all-photo solve passes the gate.
pub fn estimate_pixel_normals(
    cluster: &PhotoCluster,
    lighting: &LightingBasis,
    head_mask: &Mask,
    gate: GateOptions,
) -> NormalEstimate {
    let n = cluster.photos.len();
    assert_eq!(lighting.n_photos(), n, "lighting must come from the same cluster");
    let (w, h) = cluster.dims();
    let pixels: Vec<usize> = (0..head_mask.len()).filter(|&i| head_mask.as_slice()[i]).collect();
    let enough = |count: usize| !gate.n_over_3 || 3 * count >= n;
    let results: Vec<(usize, Option<Vector4<f64>>, u32)> = pixels
        .par_iter()
        .map(|&idx| {
            let q: Vec<f64> = cluster.photos.iter().map(|p| p.pixels.as_slice()[idx]).collect();
            let inside: Vec<usize> = (0..n).filter(|&i| cluster.photos[i].mask.as_slice()[idx]).collect();
            if inside.len() < MIN_PHOTOS || !enough(inside.len()) {
                return (idx, None, inside.len() as u32);
            }
            let Some(mut m) = solve_subset(lighting, &inside, &q) else {
                return (idx, None, 0);
            };
            let floor = 1e-9 * (1.0 + q.iter().fold(0.0f64, |a, v| a.max(v.abs())));
            let mut first_count = None;
            let mut selected = inside.clone();
            for _ in 0..gate.iterations.max(1) {
                let resid: Vec<f64> = inside.iter().map(|&i| (q[i] - lighting.row(i).dot(&m)).abs()).collect();
                let threshold = gate.multiplier * median(&mut resid.clone()) + floor;
                selected = inside
                    .iter()
                    .zip(&resid)
                    .filter(|(_, &r)| r < threshold)
                    .map(|(&i, _)| i)
                    .collect();
                first_count.get_or_insert(selected.len() as u32);
                if selected.len() < MIN_PHOTOS || !enough(selected.len()) {
                    return (idx, None, first_count.unwrap());
                }
                match solve_subset(lighting, &selected, &q) {
                    Some(sol) => m = sol,
                    None => return (idx, None, first_count.unwrap()),
                }
            }
            debug_assert!(!selected.is_empty());
            (idx, Some(m), first_count.unwrap_or(0))
        })
        .collect();
    let mut raw4 = Grid::filled(w, h, Vector4::zeros());
    let mut valid = Grid::filled(w, h, false);
    let mut selected = Grid::filled(w, h, 0u32);
    for (idx, m, count) in results {
        selected.as_mut_slice()[idx] = count;
        if let Some(m) = m {
            raw4.as_mut_slice()[idx] = m;
            valid.as_mut_slice()[idx] = true;
        }
    }
    NormalEstimate {
        field: NormalField::from_raw4(raw4, &valid),
        selected,
    }
}
