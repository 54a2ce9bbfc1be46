//! Depth from normals by sparse linear least squares.
//!
//! Each valid pixel contributes one constraint toward its right neighbor and
//! one toward its lower neighbor, `nz (z_right - z) = -nx` and
//! `nz (z_below - z) = -ny`. Where `|nz|` is too small for those to be
//! meaningful, a single tangential constraint `ny (z - z_right) = nx (z - z_below)`
//! is used instead. Optional Dirichlet data adds `||W z - W z0||^2`.

use nalgebra::Isometry3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::hgf::FloatImage;
use crate::photometric::NormalField;

/// How the normal used by a neighbor constraint is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScheme {
    /// Normalized mean of the two endpoint normals (second-order accurate).
    Midpoint,
    /// The emitting pixel's own normal.
    Forward,
}

/// Sign convention of the neighbor constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeSign {
    /// `dz/dx = -nx/nz`, `dz/dy = -ny/nz`.
    Standard,
    /// `dz/dx = nx/nz`, `dz/dy = ny/nz`.
    Flipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationOptions {
    /// `|nz|` below which the tangential constraint replaces the slopes.
    pub nz_degenerate: f64,
    pub scheme: GradientScheme,
    pub sign: SlopeSign,
    /// Scale each pixel's rows by `min(albedo, 1)`.
    pub albedo_weighting: bool,
    /// Relative residual of the normal equations at which CG stops.
    pub tolerance: f64,
    /// Iteration cap; `None` means `10 * unknowns`.
    pub max_iterations: Option<usize>,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            nz_degenerate: 0.05,
            scheme: GradientScheme::Midpoint,
            sign: SlopeSign::Standard,
            albedo_weighting: true,
            tolerance: 1e-12,
            max_iterations: None,
        }
    }
}

/// Residual above which an unconverged solve is reported as divergence.
pub const ACCEPTABLE_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Horizontal,
    Vertical,
    Tangential,
}

/// One weighted constraint row with up to three nonzeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintRow {
    pub cols: [u32; 3],
    pub coefs: [f64; 3],
    pub len: u8,
    pub rhs: f64,
    pub kind: RowKind,
}

impl ConstraintRow {
    #[inline]
    fn dot(&self, z: &[f64]) -> f64 {
        (0..self.len as usize).map(|k| self.coefs[k] * z[self.cols[k] as usize]).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len as usize).map(|k| (self.cols[k] as usize, self.coefs[k]))
    }
}

/// The sparse system `M z = v` over the valid pixels of a field.
#[derive(Debug, Clone)]
pub struct GradientSystem {
    pub rows: Vec<ConstraintRow>,
    /// Column to pixel (linear grid index).
    pub unknowns: Vec<usize>,
    /// Pixel to column.
    pub column_of: Grid<Option<u32>>,
}

impl GradientSystem {
    pub fn n_unknowns(&self) -> usize {
        self.unknowns.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.column_of.dims()
    }

    /// `M z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(z)).collect()
    }

    /// `||M z - v||^2`.
    pub fn residual_sq(&self, z: &[f64]) -> f64 {
        self.rows.iter().map(|r| (r.dot(z) - r.rhs).powi(2)).sum()
    }
}

/// Assemble the constraint rows for every valid pixel.
pub fn build_gradient_system(field: &NormalField, opts: &IntegrationOptions) -> Result<GradientSystem> {
    let (w, h) = field.dims();
    let mut column_of = Grid::filled(w, h, None);
    let mut unknowns = Vec::new();
    for i in 0..field.valid.len() {
        if field.valid.as_slice()[i] {
            column_of.as_mut_slice()[i] = Some(unknowns.len() as u32);
            unknowns.push(i);
        }
    }
    if unknowns.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let sign = match opts.sign {
        SlopeSign::Standard => -1.0,
        SlopeSign::Flipped => 1.0,
    };
    let degenerate = |n: &nalgebra::Vector3<f64>| n.z.abs() < opts.nz_degenerate;
    let rows: Vec<ConstraintRow> = unknowns
        .par_iter()
        .flat_map_iter(|&idx| {
            let (x, y) = field.valid.coords(idx);
            let col = column_of.as_slice()[idx].unwrap();
            let n = field.normals.as_slice()[idx];
            let weight = if opts.albedo_weighting {
                field.albedo.as_slice()[idx].clamp(0.0, 1.0)
            } else {
                1.0
            };
            let right = (x + 1 < w).then(|| column_of.get(x + 1, y).map(|c| (c, *field.normals.get(x + 1, y)))).flatten();
            let below = (y + 1 < h).then(|| column_of.get(x, y + 1).map(|c| (c, *field.normals.get(x, y + 1)))).flatten();
            let mut out = Vec::with_capacity(2);
            if weight <= 0.0 {
                return out.into_iter();
            }
            if degenerate(&n) {
                if let (Some((cr, _)), Some((cb, _))) = (right, below) {
                    out.push(ConstraintRow {
                        cols: [col, cr, cb],
                        coefs: [weight * (n.y - n.x), -weight * n.y, weight * n.x],
                        len: 3,
                        rhs: 0.0,
                        kind: RowKind::Tangential,
                    });
                }
                return out.into_iter();
            }
            for (neighbor, kind) in [(right, RowKind::Horizontal), (below, RowKind::Vertical)] {
                let Some((cq, nq)) = neighbor else { continue };
                let m = match opts.scheme {
                    GradientScheme::Forward => n,
                    GradientScheme::Midpoint if !degenerate(&nq) => {
                        let s = n + nq;
                        let len = s.norm();
                        if len > 1e-12 {
                            s / len
                        } else {
                            n
                        }
                    }
                    GradientScheme::Midpoint => n,
                };
                let tangent = if kind == RowKind::Horizontal { m.x } else { m.y };
                out.push(ConstraintRow {
                    cols: [cq, col, 0],
                    coefs: [weight * m.z, -weight * m.z, 0.0],
                    len: 2,
                    rhs: weight * sign * tangent,
                    kind,
                });
            }
            out.into_iter()
        })
        .collect();
    Ok(GradientSystem {
        rows,
        unknowns,
        column_of,
    })
}

/// Depth per pixel in the camera frame of the field it was integrated from.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Grid<f64>,
    pub valid: Mask,
    pub camera_to_world: Isometry3<f64>,
}

impl DepthMap {
    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.valid.get(x, y).then(|| *self.depth.get(x, y))
    }

    /// Bilinear depth at a continuous location, requiring all four
    /// neighbors to be valid.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = self.dims();
        if !(x >= 0.0 && y >= 0.0 && x <= w as f64 - 1.0 && y <= h as f64 - 1.0) {
            return None;
        }
        let x0 = (x.floor() as usize).min(w - 1);
        let y0 = (y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        for (a, b) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
            if !*self.valid.get(a, b) {
                return None;
            }
        }
        self.depth.sample_bilinear(x, y)
    }

    /// Max minus min over valid pixels.
    pub fn range(&self) -> f64 {
        let (lo, hi) = self
            .depth
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, &v)| v)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&d, _)| (lo.min(d), hi.max(d)));
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }

    pub fn to_hgf(&self) -> FloatImage {
        let (w, h) = self.dims();
        FloatImage::from_fn::<1>(w, h, |x, y| self.get(x, y).map(|d| [d]))
    }

    pub fn from_hgf(img: &FloatImage) -> Result<Self> {
        let grid = img.to_grid::<1>()?;
        Ok(Self {
            depth: grid.map(|v| v.map_or(0.0, |[d]| d)),
            valid: grid.map(Option::is_some),
            camera_to_world: Isometry3::identity(),
        })
    }
}

/// Reference depths with per-pixel blend weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConstraint {
    pub z0: Grid<f64>,
    pub weights: Grid<f64>,
}

impl BoundaryConstraint {
    /// Weights are zeroed wherever `z0` is undefined.
    pub fn new(z0: &Grid<Option<f64>>, weights: &Grid<f64>) -> Self {
        assert!(z0.same_dims(weights));
        Self {
            z0: z0.map(|v| v.unwrap_or(0.0)),
            weights: Grid::from_fn(z0.width(), z0.height(), |x, y| match z0.get(x, y) {
                Some(_) => weights.get(x, y).clamp(0.0, 1.0),
                None => 0.0,
            }),
        }
    }

    /// Constrain with weight `w` on every pixel of `region`.
    pub fn uniform(depth: &Grid<f64>, region: &Mask, w: f64) -> Self {
        let z0 = Grid::from_fn(depth.width(), depth.height(), |x, y| region.get(x, y).then(|| *depth.get(x, y)));
        Self::new(&z0, &Grid::filled(depth.width(), depth.height(), w))
    }
}

/// Blend weights for Dirichlet data: 1 at least `band` pixels inside the
/// region (Euclidean distance to the nearest in-image pixel outside it),
/// falling linearly toward 0 at the region's edge, 0 outside.
pub fn make_blend_mask(region: &Mask, band: f64) -> Result<Grid<f64>> {
    if region.count() == 0 {
        return Err(Error::EmptyRegion);
    }
    if band <= 0.0 {
        return Ok(region.map(|&r| if r { 1.0 } else { 0.0 }));
    }
    let dist2 = squared_distance_to_background(region);
    Ok(Grid::from_fn(region.width(), region.height(), |x, y| {
        if *region.get(x, y) {
            (dist2.get(x, y).sqrt() / band).min(1.0)
        } else {
            0.0
        }
    }))
}

/// As [`make_blend_mask`], but only pixels of `domain` outside the region
/// count as background: a region edge facing pixels that nothing will be
/// reconstructed on keeps full weight.
pub fn make_blend_mask_within(region: &Mask, domain: &Mask, band: f64) -> Result<Grid<f64>> {
    assert!(region.same_dims(domain));
    if region.count() == 0 {
        return Err(Error::EmptyRegion);
    }
    let closed = Grid::from_fn(region.width(), region.height(), |x, y| *region.get(x, y) || !*domain.get(x, y));
    let w = make_blend_mask(&closed, band)?;
    Ok(Grid::from_fn(region.width(), region.height(), |x, y| {
        if *region.get(x, y) {
            *w.get(x, y)
        } else {
            0.0
        }
    }))
}

/// Exact squared Euclidean distance from each pixel to the nearest unset
/// pixel (infinite when there is none).
pub fn squared_distance_to_background(region: &Mask) -> Grid<f64> {
    let (w, h) = region.dims();
    let inf = f64::INFINITY;
    let mut g = region.map(|&r| if r { inf } else { 0.0 });
    let mut f = vec![0.0; w.max(h)];
    let mut d = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            f[y] = *g.get(x, y);
        }
        edt_1d(&f[..h], &mut d[..h]);
        for y in 0..h {
            g.set(x, y, d[y]);
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = *g.get(x, y);
        }
        edt_1d(&f[..w], &mut d[..w]);
        for x in 0..w {
            g.set(x, y, d[x]);
        }
    }
    g
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        d.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = inter(q, p);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            let s = inter(q, *v.last().unwrap());
            v.push(q);
            z.push(s);
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Outcome of a least-squares solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub z: Vec<f64>,
    pub relative_residual: f64,
    pub iterations: usize,
}

/// Connected groups of unknowns under the constraint rows.
fn components(system: &GradientSystem) -> Vec<u32> {
    let n = system.n_unknowns();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut a: u32) -> u32 {
        while parent[a as usize] != a {
            parent[a as usize] = parent[parent[a as usize] as usize];
            a = parent[a as usize];
        }
        a
    }
    for r in &system.rows {
        let first = r.cols[0];
        for k in 1..r.len as usize {
            if r.coefs[k] == 0.0 && r.coefs[0] == 0.0 {
                continue;
            }
            let (a, b) = (find(&mut parent, first), find(&mut parent, r.cols[k]));
            if a != b {
                parent[a.max(b) as usize] = a.min(b);
            }
        }
    }
    let mut label = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for i in 0..n {
        let root = find(&mut parent, i as u32) as usize;
        if label[root] == u32::MAX {
            label[root] = next;
            next += 1;
        }
        out[i] = label[root];
    }
    out
}

/// The normal-equation operator `M^T M + W^2 + gauge`.
struct NormalOperator<'a> {
    system: &'a GradientSystem,
    w2: Vec<f64>,
    /// Component label per unknown and per-component gauge weights
    /// (`1/|c|` for components without Dirichlet data, else 0).
    component: Vec<u32>,
    gauge: Vec<f64>,
}

impl NormalOperator<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (&w, &xi)) in out.iter_mut().zip(self.w2.iter().zip(x)) {
            *o = w * xi;
        }
        for r in &self.system.rows {
            let mz = r.dot(x);
            for k in 0..r.len as usize {
                out[r.cols[k] as usize] += r.coefs[k] * mz;
            }
        }
        let mut sums = vec![0.0; self.gauge.len()];
        for (&c, &xi) in self.component.iter().zip(x) {
            sums[c as usize] += xi;
        }
        for (o, &c) in out.iter_mut().zip(&self.component) {
            let g = self.gauge[c as usize];
            if g != 0.0 {
                *o += g * sums[c as usize];
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = self.w2.clone();
        for r in &self.system.rows {
            for k in 0..r.len as usize {
                d[r.cols[k] as usize] += r.coefs[k] * r.coefs[k];
            }
        }
        for (di, &c) in d.iter_mut().zip(&self.component) {
            *di += self.gauge[c as usize];
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted Dirichlet terms per unknown: `(W^2, W^2 z0)`.
fn dirichlet_terms(system: &GradientSystem, bc: Option<&BoundaryConstraint>) -> (Vec<f64>, Vec<f64>) {
    let n = system.n_unknowns();
    match bc {
        None => (vec![0.0; n], vec![0.0; n]),
        Some(bc) => {
            assert_eq!(bc.weights.dims(), system.dims(), "constraint grid mismatch");
            let w2: Vec<f64> = system.unknowns.iter().map(|&i| bc.weights.as_slice()[i].powi(2)).collect();
            let w2z0 = system
                .unknowns
                .iter()
                .zip(&w2)
                .map(|(&i, &w)| w * bc.z0.as_slice()[i])
                .collect();
            (w2, w2z0)
        }
    }
}

/// `||M z - v||^2 + ||W z - W z0||^2`.
pub fn objective(system: &GradientSystem, bc: Option<&BoundaryConstraint>, z: &[f64]) -> f64 {
    let mut total = system.residual_sq(z);
    if let Some(bc) = bc {
        for (col, &i) in system.unknowns.iter().enumerate() {
            let w = bc.weights.as_slice()[i];
            total += (w * (z[col] - bc.z0.as_slice()[i])).powi(2);
        }
    }
    total
}

/// Minimize `||M z - v||^2 + ||W z - W z0||^2` with conjugate gradients on
/// the normal equations. Every connected group of pixels without Dirichlet
/// data is pinned to zero mean.
pub fn solve_system(
    system: &GradientSystem,
    bc: Option<&BoundaryConstraint>,
    opts: &IntegrationOptions,
    initial: Option<&[f64]>,
) -> Result<Solution> {
    let n = system.n_unknowns();
    let (w2, w2z0) = dirichlet_terms(system, bc);
    let component = components(system);
    let n_comp = component.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut size = vec![0usize; n_comp];
    let mut anchored = vec![false; n_comp];
    for (i, &c) in component.iter().enumerate() {
        size[c as usize] += 1;
        if w2[i] > 0.0 {
            anchored[c as usize] = true;
        }
    }
    let gauge: Vec<f64> = (0..n_comp)
        .map(|c| if anchored[c] { 0.0 } else { 1.0 / size[c] as f64 })
        .collect();
    let op = NormalOperator {
        system,
        w2,
        component,
        gauge,
    };
    let mut b = w2z0;
    for r in &system.rows {
        for k in 0..r.len as usize {
            b[r.cols[k] as usize] += r.coefs[k] * r.rhs;
        }
    }
    let b_norm = dot(&b, &b).sqrt();
    let mut x = match initial {
        Some(z) => {
            assert_eq!(z.len(), n);
            z.to_vec()
        }
        None => vec![0.0; n],
    };
    if b_norm == 0.0 && initial.is_none() {
        return Ok(Solution {
            z: x,
            relative_residual: 0.0,
            iterations: 0,
        });
    }
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut ax = vec![0.0; n];
    op.apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut zv: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = zv.clone();
    let mut rz = dot(&r, &zv);
    let mut ap = vec![0.0; n];
    let max_iter = opts.max_iterations.unwrap_or(10 * n).max(1);
    let stall_window = 2000usize.max(n);
    let mut best = dot(&r, &r).sqrt() / scale;
    let mut best_at = 0usize;
    let mut best_x = x.clone();
    let mut iterations = 0;
    while iterations < max_iter {
        let res = dot(&r, &r).sqrt() / scale;
        if res < best {
            if res < 0.5 * best {
                best_at = iterations;
            }
            best = res;
            best_x.copy_from_slice(&x);
        }
        if res <= opts.tolerance || iterations - best_at > stall_window {
            break;
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            zv[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = zv[i] + beta * p[i];
        }
        iterations += 1;
    }
    // Recompute the true residual of the best iterate.
    op.apply(&best_x, &mut ax);
    let true_res = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt() / scale;
    let final_res = dot(&r, &r).sqrt() / scale;
    let (z, residual) = if final_res <= true_res {
        op.apply(&x, &mut ax);
        let res_x = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt() / scale;
        if res_x <= true_res {
            (x, res_x)
        } else {
            (best_x, true_res)
        }
    } else {
        (best_x, true_res)
    };
    if !(residual <= ACCEPTABLE_RESIDUAL.max(opts.tolerance)) {
        return Err(Error::SolverDivergence {
            residual,
            iterations,
        });
    }
    Ok(Solution {
        z,
        relative_residual: residual,
        iterations,
    })
}

/// Integrate a normal field into a depth map (identity pose).
pub fn integrate_normals(
    field: &NormalField,
    bc: Option<&BoundaryConstraint>,
    opts: &IntegrationOptions,
) -> Result<DepthMap> {
    let system = build_gradient_system(field, opts)?;
    let sol = solve_system(&system, bc, opts, None)?;
    Ok(depth_from_solution(&system, &sol.z))
}

pub fn depth_from_solution(system: &GradientSystem, z: &[f64]) -> DepthMap {
    let (w, h) = system.dims();
    let mut depth = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for (col, &i) in system.unknowns.iter().enumerate() {
        depth.as_mut_slice()[i] = z[col];
        valid.as_mut_slice()[i] = true;
    }
    DepthMap {
        depth,
        valid,
        camera_to_world: Isometry3::identity(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn constant_field(w: usize, h: usize, n: Vector3<f64>) -> NormalField {
        NormalField::from_normals(&Grid::filled(w, h, Some(n.normalize())))
    }

    #[test]
    fn flat_field_has_zero_rhs_and_depth() {
        let f = constant_field(12, 9, Vector3::z());
        let opts = IntegrationOptions::default();
        let sys = build_gradient_system(&f, &opts).unwrap();
        assert!(sys.rows.iter().all(|r| r.rhs == 0.0));
        // (w-1)*h horizontal + w*(h-1) vertical rows
        assert_eq!(sys.rows.len(), 11 * 9 + 12 * 8);
        let d = integrate_normals(&f, None, &opts).unwrap();
        assert!(d.depth.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn plane_rows_demand_the_slope() {
        let (a, b) = (0.4, -0.25);
        let f = constant_field(8, 8, Vector3::new(-a, -b, 1.0));
        let sys = build_gradient_system(&f, &IntegrationOptions::default()).unwrap();
        for r in &sys.rows {
            // coefs[0] multiplies the neighbor, coefs[1] the pixel itself.
            let slope = r.rhs / r.coefs[0];
            assert!((r.coefs[0] + r.coefs[1]).abs() < 1e-15);
            match r.kind {
                RowKind::Horizontal => assert!((slope - a).abs() < 1e-12),
                RowKind::Vertical => assert!((slope - b).abs() < 1e-12),
                RowKind::Tangential => unreachable!(),
            }
        }
    }

    #[test]
    fn grazing_pixel_uses_tangential_row() {
        let mut normals = Grid::filled(4, 4, Some(Vector3::z()));
        normals.set(1, 1, Some(Vector3::new(0.6, 0.8, 0.01).normalize()));
        let f = NormalField::from_normals(&normals);
        let sys = build_gradient_system(&f, &IntegrationOptions::default()).unwrap();
        let col = sys.column_of.get(1, 1).unwrap();
        let own: Vec<_> = sys
            .rows
            .iter()
            .filter(|r| r.kind != RowKind::Tangential && r.cols[1] == col)
            .collect();
        assert!(own.is_empty());
        let tang: Vec<_> = sys.rows.iter().filter(|r| r.kind == RowKind::Tangential).collect();
        assert_eq!(tang.len(), 1);
        assert_eq!(tang[0].cols[0], col);
        let sum: f64 = tang[0].coefs.iter().sum();
        assert!(sum.abs() < 1e-15, "ones vector must be in the nullspace");
    }

    #[test]
    fn no_valid_pixels() {
        let f = NormalField::empty(4, 4);
        assert!(matches!(
            build_gradient_system(&f, &IntegrationOptions::default()),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn dirichlet_left_edge_propagates() {
        let f = constant_field(10, 6, Vector3::z());
        let z0 = Grid::from_fn(10, 6, |x, _| (x == 0).then_some(5.0));
        let bc = BoundaryConstraint::new(&z0, &Grid::filled(10, 6, 1.0));
        let d = integrate_normals(&f, Some(&bc), &IntegrationOptions::default()).unwrap();
        for &z in d.depth.iter() {
            assert!((z - 5.0).abs() < 1e-8, "{z}");
        }
    }

    #[test]
    fn blend_mask_band_zero_is_indicator() {
        let region = Grid::from_fn(9, 9, |x, y| x > 2 && y < 6);
        let w = make_blend_mask(&region, 0.0).unwrap();
        for i in 0..region.len() {
            assert_eq!(w.as_slice()[i], if region.as_slice()[i] { 1.0 } else { 0.0 });
        }
        assert!(matches!(
            make_blend_mask(&Grid::filled(3, 3, false), 4.0),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn full_region_is_all_ones() {
        let w = make_blend_mask(&Grid::filled(12, 7, true), 10.0).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let region = Grid::from_fn(17, 13, |x, y| (x * 7 + y * 3) % 11 != 0);
        let d2 = squared_distance_to_background(&region);
        for y in 0..13 {
            for x in 0..17 {
                let mut best = f64::INFINITY;
                for by in 0..13 {
                    for bx in 0..17 {
                        if !*region.get(bx, by) {
                            let dx = x as f64 - bx as f64;
                            let dy = y as f64 - by as f64;
                            best = best.min(dx * dx + dy * dy);
                        }
                    }
                }
                assert_eq!(*d2.get(x, y), best);
            }
        }
    }
}
