//! Resolution of the 4x4 factorization ambiguity by linear regression of
//! estimated raw vectors onto reference raw vectors.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::photometric::NormalField;

/// Minimum overlap, in pixels, for a regression.
pub const MIN_OVERLAP: usize = 100;

/// Largest accepted condition number of a transform.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityTransform {
    pub matrix: Matrix4<f64>,
}

impl AmbiguityTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    /// Wrap a matrix, rejecting singular or badly conditioned ones.
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let condition = condition_number(&matrix);
        if !(condition < MAX_CONDITION) {
            return Err(Error::SingularTransform { condition });
        }
        Ok(Self { matrix })
    }

    pub fn condition(&self) -> f64 {
        condition_number(&self.matrix)
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or(Error::SingularTransform { condition: f64::INFINITY })?;
        Self::new(inv)
    }
}

pub fn condition_number(m: &Matrix4<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 && max.is_finite() {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Pixels valid in both fields.
pub fn overlap_mask(a: &NormalField, b: &NormalField) -> Mask {
    a.valid.and(&b.valid)
}

/// Least-squares `A` minimizing `sum ||ref_raw4 - A est_raw4||^2` over the
/// overlap pixels.
pub fn solve_linear_ambiguity(
    estimated: &NormalField,
    reference: &NormalField,
    overlap: &Mask,
) -> Result<AmbiguityTransform> {
    assert_eq!(estimated.dims(), reference.dims(), "fields must share a grid");
    let mut count = 0usize;
    let mut eet = Matrix4::zeros();
    let mut ret = Matrix4::zeros();
    for i in 0..overlap.len() {
        if !(overlap.as_slice()[i] && estimated.valid.as_slice()[i] && reference.valid.as_slice()[i]) {
            continue;
        }
        let e: Vector4<f64> = estimated.raw4.as_slice()[i];
        let r: Vector4<f64> = reference.raw4.as_slice()[i];
        eet += e * e.transpose();
        ret += r * e.transpose();
        count += 1;
    }
    if count < MIN_OVERLAP {
        return Err(Error::InsufficientOverlap {
            found: count,
            required: MIN_OVERLAP,
        });
    }
    let eig = SymmetricEigen::new(eet);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::RankDeficientNormals);
    }
    // A = R E^T (E E^T)^-1 via the eigendecomposition of the SPD Gram.
    let inv_diag = Matrix4::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let gram_inv = eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    AmbiguityTransform::new(ret * gram_inv)
}

/// Map every valid raw vector through `A` and renormalize.
pub fn apply_ambiguity(transform: &AmbiguityTransform, field: &NormalField) -> Result<NormalField> {
    let condition = transform.condition();
    if !(condition < MAX_CONDITION) {
        return Err(Error::SingularTransform { condition });
    }
    let mut out = field.clone();
    for i in 0..field.valid.len() {
        if !field.valid.as_slice()[i] {
            continue;
        }
        let m = transform.matrix * field.raw4.as_slice()[i];
        out.raw4.as_mut_slice()[i] = m;
        let n = m.fixed_rows::<3>(1).into_owned();
        let len = n.norm();
        if len > 1e-300 {
            out.normals.as_mut_slice()[i] = n / len;
            out.albedo.as_mut_slice()[i] = len;
        } else {
            out.normals.as_mut_slice()[i] = nalgebra::Vector3::z();
            out.albedo.as_mut_slice()[i] = 0.0;
        }
    }
    Ok(out)
}

/// Sum of squared raw-vector differences over the overlap.
pub fn regression_objective(transform: &Matrix4<f64>, estimated: &NormalField, reference: &NormalField, overlap: &Mask) -> f64 {
    (0..overlap.len())
        .filter(|&i| overlap.as_slice()[i])
        .map(|i| (reference.raw4.as_slice()[i] - transform * estimated.raw4.as_slice()[i]).norm_squared())
        .sum()
}
