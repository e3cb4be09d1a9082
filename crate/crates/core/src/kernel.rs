//! Sampled affine Gaussian kernels and their derivatives.
//!
//! Every kernel is a polynomial in the canonical coordinate `xi = A^-1 eta`
//! times the Gaussian `exp(-|xi|^2 / 2 sigma^2)`, sampled on the integer pixel
//! grid `eta`. Derivatives are taken with respect to `xi`, so responses are
//! expressed in the canonical frame: with `A = I` they are ordinary image
//! derivatives.

use nalgebra::Matrix2;

use crate::affine::{spectral_norm, AffineParams};
use crate::error::Result;
use crate::image::Kernel2D;

/// Gaussian truncation, in standard deviations along the widest axis.
pub const GAUSS_TRUNCATION: f64 = 4.0;
/// Derivative kernel truncation.
pub const DERIVATIVE_TRUNCATION: f64 = 4.0;

/// Which derivative of the affine Gaussian a kernel samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Gauss,
    Dx,
    Dy,
    Log,
    LogDx,
    LogDy,
    LogDxx,
    LogDxy,
    LogDyy,
}

impl KernelKind {
    pub const ALL: [KernelKind; 9] = [
        KernelKind::Gauss,
        KernelKind::Dx,
        KernelKind::Dy,
        KernelKind::Log,
        KernelKind::LogDx,
        KernelKind::LogDy,
        KernelKind::LogDxx,
        KernelKind::LogDxy,
        KernelKind::LogDyy,
    ];

    fn truncation(self) -> f64 {
        match self {
            KernelKind::Gauss => GAUSS_TRUNCATION,
            _ => DERIVATIVE_TRUNCATION,
        }
    }

    /// Terms `(coef, m, n)` of the polynomial `sum coef * xi_x^m * xi_y^n`
    /// multiplying the Gaussian, for variance `s = sigma^2`.
    fn polynomial(self, s: f64) -> Vec<(f64, u32, u32)> {
        let s2 = s * s;
        let s3 = s2 * s;
        match self {
            KernelKind::Gauss => vec![(1.0, 0, 0)],
            KernelKind::Dx => vec![(-1.0 / s, 1, 0)],
            KernelKind::Dy => vec![(-1.0 / s, 0, 1)],
            // (r^2/s^2 - 2/s)
            KernelKind::Log => vec![(1.0 / s2, 2, 0), (1.0 / s2, 0, 2), (-2.0 / s, 0, 0)],
            // x (4 - r^2/s) / s^2
            KernelKind::LogDx => vec![(4.0 / s2, 1, 0), (-1.0 / s3, 3, 0), (-1.0 / s3, 1, 2)],
            KernelKind::LogDy => vec![(4.0 / s2, 0, 1), (-1.0 / s3, 0, 3), (-1.0 / s3, 2, 1)],
            // [(4 - r^2/s) - x^2/s (6 - r^2/s)] / s^2
            KernelKind::LogDxx => vec![
                (4.0 / s2, 0, 0),
                (-1.0 / s3, 2, 0),
                (-1.0 / s3, 0, 2),
                (-6.0 / s3, 2, 0),
                (1.0 / (s3 * s), 4, 0),
                (1.0 / (s3 * s), 2, 2),
            ],
            KernelKind::LogDyy => vec![
                (4.0 / s2, 0, 0),
                (-1.0 / s3, 0, 2),
                (-1.0 / s3, 2, 0),
                (-6.0 / s3, 0, 2),
                (1.0 / (s3 * s), 0, 4),
                (1.0 / (s3 * s), 2, 2),
            ],
            // -x y (6 - r^2/s) / s^3
            KernelKind::LogDxy => vec![
                (-6.0 / s3, 1, 1),
                (1.0 / (s3 * s), 3, 1),
                (1.0 / (s3 * s), 1, 3),
            ],
        }
    }

    /// Odd kernels sum to zero by symmetry; even derivative kernels need an
    /// explicit correction after truncation.
    fn needs_zero_mean(self) -> bool {
        matches!(
            self,
            KernelKind::Log | KernelKind::LogDxx | KernelKind::LogDyy | KernelKind::LogDxy
        )
    }
}

pub fn kernel_radius(a: &Matrix2<f64>, sigma: f64, truncation: f64) -> usize {
    (truncation * sigma * spectral_norm(a) - 1e-9).ceil().max(1.0) as usize
}

/// Anisotropic Gaussian `g(eta; A sigma^2 A^T)`, renormalized to unit sum.
pub fn anisotropic_gaussian_kernel(p: &AffineParams) -> Result<Kernel2D> {
    affine_kernel(p, KernelKind::Gauss)
}

/// Samples kernel `kind` for transform `p.a` at scale `p.sigma`.
///
/// Axis-aligned transforms (each canonical coordinate depends on a single
/// pixel axis) produce a factored kernel.
pub fn affine_kernel(p: &AffineParams, kind: KernelKind) -> Result<Kernel2D> {
    let radius = kernel_radius(&p.a, p.sigma, kind.truncation());
    let inv = p.inverse();
    match axis_aligned(&inv) {
        Some(axes) => factored_kernel(radius, p.sigma, kind, axes),
        None => dense_kernel(radius, p.sigma, kind, &inv),
    }
}

/// For `xi = inv * eta`, returns `(px, x_on_x_axis, qy)` when `xi_x = px * eta_i`
/// and `xi_y = qy * eta_j` with `{i, j} = {x, y}`.
fn axis_aligned(inv: &Matrix2<f64>) -> Option<(f64, bool, f64)> {
    let tol = 1e-12 * inv.abs().max();
    let zero = |v: f64| v.abs() <= tol;
    let diag = zero(inv[(0, 1)]) && zero(inv[(1, 0)]);
    let anti = zero(inv[(0, 0)]) && zero(inv[(1, 1)]);
    if diag {
        Some((inv[(0, 0)], true, inv[(1, 1)]))
    } else if anti {
        Some((inv[(0, 1)], false, inv[(1, 0)]))
    } else {
        None
    }
}

fn dense_kernel(radius: usize, sigma: f64, kind: KernelKind, inv: &Matrix2<f64>) -> Result<Kernel2D> {
    let s = sigma * sigma;
    let poly = kind.polynomial(s);
    let side = 2 * radius + 1;
    let r = radius as isize;
    let mut gauss = Vec::with_capacity(side * side);
    let mut weights = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            let (ex, ey) = (dx as f64, dy as f64);
            let xi_x = inv[(0, 0)] * ex + inv[(0, 1)] * ey;
            let xi_y = inv[(1, 0)] * ex + inv[(1, 1)] * ey;
            let g = (-(xi_x * xi_x + xi_y * xi_y) / (2.0 * s)).exp();
            let pv: f64 = poly
                .iter()
                .map(|&(c, m, n)| c * xi_x.powi(m as i32) * xi_y.powi(n as i32))
                .sum();
            gauss.push(g);
            weights.push(pv * g);
        }
    }
    let gsum: f64 = gauss.iter().sum();
    for w in weights.iter_mut() {
        *w /= gsum;
    }
    if kind.needs_zero_mean() {
        let offset: f64 = weights.iter().sum();
        for (w, g) in weights.iter_mut().zip(&gauss) {
            *w -= offset * g / gsum;
        }
    }
    Kernel2D::new(radius, weights)
}

fn factored_kernel(
    radius: usize,
    sigma: f64,
    kind: KernelKind,
    (px, x_on_x_axis, qy): (f64, bool, f64),
) -> Result<Kernel2D> {
    let s = sigma * sigma;
    let r = radius as isize;
    // 1-D monomial-times-Gaussian profile along one pixel axis.
    let profile = |scale: f64, power: u32| -> Vec<f64> {
        (-r..=r)
            .map(|t| {
                let xi = scale * t as f64;
                xi.powi(power as i32) * (-(xi * xi) / (2.0 * s)).exp()
            })
            .collect()
    };
    let gx = profile(px, 0);
    let gy = profile(qy, 0);
    let norm = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
    // (column, row) ordering depends on which pixel axis carries xi_x.
    let make = |coef: f64, m: u32, n: u32| -> (Vec<f64>, Vec<f64>) {
        let fx: Vec<f64> = profile(px, m).into_iter().map(|v| v * coef / norm).collect();
        let fy = profile(qy, n);
        if x_on_x_axis {
            (fy, fx)
        } else {
            (fx, fy)
        }
    };
    let mut factors: Vec<(Vec<f64>, Vec<f64>)> = kind
        .polynomial(s)
        .into_iter()
        .map(|(c, m, n)| make(c, m, n))
        .collect();
    if kind.needs_zero_mean() {
        let total: f64 = factors
            .iter()
            .map(|(c, r)| c.iter().sum::<f64>() * r.iter().sum::<f64>())
            .sum();
        factors.push(make(-total, 0, 0));
    }
    Kernel2D::from_factors(radius, factors)
}
