//! Affine transform plus scale, the parameterization shared by every
//! anisotropic kernel.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

pub const MIN_DET: f64 = 1e-9;
pub const MAX_SIGMA: f64 = 64.0;

/// 2x2 affine transform `A` and scale `sigma`.
///
/// The kernel covariance is `A sigma^2 A^T`. Pixel offsets `eta` relate to the
/// canonical (frontal) frame by `eta = A xi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub a: Matrix2<f64>,
    pub sigma: f64,
}

impl AffineParams {
    pub fn new(a: Matrix2<f64>, sigma: f64) -> Result<Self> {
        check_transform(&a)?;
        if !(sigma > 0.0 && sigma <= MAX_SIGMA) {
            return Err(Error::InvalidScale(sigma));
        }
        Ok(AffineParams { a, sigma })
    }

    pub fn isotropic(sigma: f64) -> Result<Self> {
        Self::new(Matrix2::identity(), sigma)
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.a, sigma)
    }

    /// Covariance `A sigma^2 A^T`.
    pub fn covariance(&self) -> Matrix2<f64> {
        self.a * self.a.transpose() * (self.sigma * self.sigma)
    }

    pub fn inverse(&self) -> Matrix2<f64> {
        // Invertibility is checked at construction.
        self.a.try_inverse().expect("checked invertible")
    }
}

pub(crate) fn check_transform(a: &Matrix2<f64>) -> Result<()> {
    let det = a.determinant();
    if !det.is_finite() || det.abs() <= MIN_DET || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateTransform { det });
    }
    Ok(())
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `R(phi) * diag(tilt, 1)`.
pub fn tilt_transform(tilt: f64, phi: f64) -> Matrix2<f64> {
    rotation(phi) * Matrix2::new(tilt, 0.0, 0.0, 1.0)
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix2<f64>) -> f64 {
    let ata = a.transpose() * a;
    sym_eigenvalues(&ata).1.max(0.0).sqrt()
}

/// Eigenvalues `(min, max)` of a symmetric 2x2 matrix.
pub fn sym_eigenvalues(m: &Matrix2<f64>) -> (f64, f64) {
    let a = m[(0, 0)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let d = m[(1, 1)];
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (mean - r, mean + r)
}

/// Orthogonal factor of the polar decomposition `M = Q P`.
pub fn polar_rotation(m: &Matrix2<f64>) -> Matrix2<f64> {
    // For 2x2 matrices with positive determinant, Q is the rotation by the
    // angle of (m00 + m11, m10 - m01).
    let det = m.determinant();
    if det >= 0.0 {
        let angle = (m[(1, 0)] - m[(0, 1)]).atan2(m[(0, 0)] + m[(1, 1)]);
        rotation(angle)
    } else {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        u * vt
    }
}

#[inline]
pub fn apply(m: &Matrix2<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = m * Vector2::new(x, y);
    (v[0], v[1])
}
