//! Affine Gaussian pyramid, affine LoG / LoG-derivative stacks and the
//! per-pixel cubic expression of each stack in the scale variable.
//!
//! Each octave samples four scales `{1.6, 1.6√2, 3.2, 3.2√2}` (octave-relative
//! units). Every stack raster at scale `σᵢ` is produced by convolving a small
//! kernel of fixed scale `δ = SPLIT_SCALE` with a pre-blurred Gaussian raster
//! at `γᵢ = sqrt(σᵢ² − δ²)`, relying on the semi-group property of affine
//! Gaussians (covariances add). The pre-blurred rasters form an incremental
//! chain inside the octave; the next octave starts from a 2x2 block average of
//! the second pre-blurred raster.

use std::f64::consts::SQRT_2;

use nalgebra::{Matrix2, Matrix4, Vector4};
use rayon::prelude::*;

use crate::affine::AffineParams;
use crate::error::{Error, Result};
use crate::image::{bilinear_cell, convolve, downsample2, GrayImage};
use crate::kernel::{affine_kernel, anisotropic_gaussian_kernel, KernelKind};

/// Sample scales of one octave, in octave-relative pixels.
pub const LADDER: [f64; 4] = [1.6, 1.6 * SQRT_2, 3.2, 3.2 * SQRT_2];

/// Scale of the kernels applied on top of the pre-blurred rasters.
pub const SPLIT_SCALE: f64 = 0.8 * SQRT_2;

/// Smallest admissible octave side.
pub const MIN_OCTAVE_SIDE: usize = 16;

/// Gradient stacks are stored multiplied by `σ^GRADIENT_NORM_POWER`, which
/// keeps them nearly flat in σ and the cubic fit accurate between samples.
pub const GRADIENT_NORM_POWER: i32 = 2;

pub type Stack = [GrayImage; 4];

/// Pre-blur scales `γᵢ = sqrt(σᵢ² − δ²)`.
pub fn pre_scales() -> [f64; 4] {
    LADDER.map(|s| (s * s - SPLIT_SCALE * SPLIT_SCALE).sqrt())
}

/// LoG and LoG-derivative stacks plus the Gaussian gradient stacks of an octave.
///
/// LoG responses (and their derivatives) are multiplied by `σ²`, gradients
/// by `σ^GRADIENT_NORM_POWER`.
#[derive(Debug, Clone)]
pub struct DerivativeStacks {
    pub log: Stack,
    pub log_dx: Stack,
    pub log_dy: Stack,
    pub log_dxx: Stack,
    pub log_dxy: Stack,
    pub log_dyy: Stack,
    pub grad_x: Stack,
    pub grad_y: Stack,
}

#[derive(Debug, Clone)]
pub struct Octave {
    pub level: usize,
    pub scales: [f64; 4],
    pub gauss: Stack,
    /// Pre-blurred rasters at `pre_scales()`.
    pub pre: Stack,
    pub stacks: Option<DerivativeStacks>,
}

impl Octave {
    pub fn width(&self) -> usize {
        self.gauss[0].width()
    }

    pub fn height(&self) -> usize {
        self.gauss[0].height()
    }

    /// Octave pixel coordinate to original-image coordinate.
    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        to_original(self.level, x, y)
    }
}

pub fn to_original(level: usize, x: f64, y: f64) -> (f64, f64) {
    let f = (1usize << level) as f64;
    (f * (x + 0.5) - 0.5, f * (y + 0.5) - 0.5)
}

pub fn from_original(level: usize, x: f64, y: f64) -> (f64, f64) {
    let f = (1usize << level) as f64;
    ((x + 0.5) / f - 0.5, (y + 0.5) / f - 0.5)
}

/// Single convolution with the affine Gaussian of scale `sigma`.
pub fn blur(img: &GrayImage, a: &Matrix2<f64>, sigma: f64) -> Result<GrayImage> {
    let k = anisotropic_gaussian_kernel(&AffineParams::new(*a, sigma)?)?;
    convolve(img, &k)
}

/// Widest Gaussian kernel radius used while building an octave.
fn max_radius(a: &Matrix2<f64>) -> usize {
    let g = pre_scales();
    let inc = (g[3] * g[3] - g[2] * g[2]).sqrt();
    crate::kernel::kernel_radius(a, inc, crate::kernel::GAUSS_TRUNCATION)
        .max(crate::kernel::kernel_radius(
            a,
            SPLIT_SCALE,
            crate::kernel::DERIVATIVE_TRUNCATION,
        ))
}

/// Number of octaves that fit an image of the given size (capped at `cap`).
pub fn octaves_that_fit(width: usize, height: usize, a: &Matrix2<f64>, cap: usize) -> usize {
    let need = MIN_OCTAVE_SIDE.max(max_radius(a) + 1);
    let mut n = 0;
    let (mut w, mut h) = (width, height);
    while n < cap && w.min(h) >= need {
        n += 1;
        w /= 2;
        h /= 2;
    }
    n
}

/// Builds the Gaussian part of the pyramid (`gauss` and `pre` rasters).
pub fn build_pyramid(img: &GrayImage, a: &AffineParams, n_octaves: usize) -> Result<Vec<Octave>> {
    if n_octaves == 0 {
        return Err(Error::Size("at least one octave is required".into()));
    }
    let fit = octaves_that_fit(img.width(), img.height(), &a.a, n_octaves);
    if fit < n_octaves {
        return Err(Error::Size(format!(
            "{}x{} image supports only {fit} octave(s), {n_octaves} requested",
            img.width(),
            img.height()
        )));
    }
    let gammas = pre_scales();
    let gauss_k = anisotropic_gaussian_kernel(&a.with_sigma(SPLIT_SCALE)?)?;
    let mut octaves = Vec::with_capacity(n_octaves);
    // Octave 0 starts from the raw input (scale 0); later octaves from the
    // downsampled second pre-blurred raster, at scale γ₂ / 2.
    let mut base = img.clone();
    let mut base_scale = 0.0f64;
    for level in 0..n_octaves {
        let mut pre: Vec<GrayImage> = Vec::with_capacity(4);
        let mut prev_scale = base_scale;
        let mut src = base;
        for &g in &gammas {
            let inc = (g * g - prev_scale * prev_scale).sqrt();
            let next = blur(&src, &a.a, inc)?;
            pre.push(next.clone());
            src = next;
            prev_scale = g;
        }
        let pre: Stack = pre.try_into().expect("four rasters");
        let gauss: Vec<GrayImage> = pre
            .par_iter()
            .map(|p| convolve(p, &gauss_k))
            .collect::<Result<_>>()?;
        base = downsample2(&pre[1])?;
        base_scale = gammas[1] / 2.0;
        octaves.push(Octave {
            level,
            scales: LADDER,
            gauss: gauss.try_into().expect("four rasters"),
            pre,
            stacks: None,
        });
    }
    Ok(octaves)
}

/// Fills the LoG, LoG-derivative and gradient stacks of an octave.
pub fn log_and_derivatives(oct: &mut Octave, a: &AffineParams) -> Result<()> {
    let p = a.with_sigma(SPLIT_SCALE)?;
    let kinds = [
        KernelKind::Log,
        KernelKind::LogDx,
        KernelKind::LogDy,
        KernelKind::LogDxx,
        KernelKind::LogDxy,
        KernelKind::LogDyy,
        KernelKind::Dx,
        KernelKind::Dy,
    ];
    let kernels: Vec<_> = kinds
        .iter()
        .map(|&k| affine_kernel(&p, k))
        .collect::<Result<_>>()?;
    let mut out: Vec<Stack> = Vec::with_capacity(kinds.len());
    for (kind, k) in kinds.iter().zip(&kernels) {
        let mut rasters = Vec::with_capacity(4);
        for (pre, &sigma) in oct.pre.iter().zip(&oct.scales) {
            let mut r = convolve(pre, k)?;
            let norm = if matches!(kind, KernelKind::Dx | KernelKind::Dy) {
                sigma.powi(GRADIENT_NORM_POWER)
            } else {
                sigma * sigma
            } as f32;
            r.data_mut().iter_mut().for_each(|v| *v *= norm);
            rasters.push(r);
        }
        out.push(rasters.try_into().expect("four rasters"));
    }
    let mut it = out.into_iter();
    let mut next = || it.next().expect("stack");
    oct.stacks = Some(DerivativeStacks {
        log: next(),
        log_dx: next(),
        log_dy: next(),
        log_dxx: next(),
        log_dxy: next(),
        log_dyy: next(),
        grad_x: next(),
        grad_y: next(),
    });
    Ok(())
}

/// Maps four scale samples to cubic coefficients `(a, b, c, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyParamMatrix {
    pub m: Matrix4<f64>,
    pub scales: [f64; 4],
}

impl PolyParamMatrix {
    pub fn coefficients(&self, samples: [f64; 4]) -> [f64; 4] {
        let c = self.m * Vector4::from(samples);
        [c[0], c[1], c[2], c[3]]
    }
}

/// Rows of the Vandermonde matrix are `[σ³ σ² σ 1]`.
pub fn vandermonde(scales: &[f64; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| scales[i].powi(3 - j as i32))
}

pub fn compute_poly_param_matrix(scales: [f64; 4]) -> Result<PolyParamMatrix> {
    if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidScale(
            scales.iter().cloned().fold(f64::NAN, f64::min),
        ));
    }
    for i in 0..4 {
        for j in i + 1..4 {
            if scales[i] == scales[j] {
                return Err(Error::Singular(format!("duplicate scale {}", scales[i])));
            }
        }
    }
    let m = vandermonde(&scales)
        .try_inverse()
        .ok_or_else(|| Error::Singular("Vandermonde matrix".into()))?;
    Ok(PolyParamMatrix { m, scales })
}

/// Per-pixel cubic `f(σ) = a σ³ + b σ² + c σ + d`, coefficients kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyField {
    width: usize,
    height: usize,
    coef: [Vec<f64>; 4],
}

impl PolyField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Coefficient plane `k` (0 = σ³ term, 3 = constant).
    pub fn plane(&self, k: usize) -> &[f64] {
        &self.coef[k]
    }

    #[inline]
    pub fn coefficients_at(&self, x: usize, y: usize) -> [f64; 4] {
        let i = y * self.width + x;
        [self.coef[0][i], self.coef[1][i], self.coef[2][i], self.coef[3][i]]
    }

    /// Bilinearly interpolated coefficients at a continuous position.
    pub fn coefficients_bilinear(&self, x: f64, y: f64) -> Result<[f64; 4]> {
        let (x0, y0, fx, fy) =
            bilinear_cell(x, y, self.width, self.height).ok_or(Error::OutOfBounds { x, y })?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let c00 = self.coefficients_at(x0, y0);
        let c10 = self.coefficients_at(x1, y0);
        let c01 = self.coefficients_at(x0, y1);
        let c11 = self.coefficients_at(x1, y1);
        let mut out = [0.0; 4];
        for k in 0..4 {
            let top = c00[k] + (c10[k] - c00[k]) * fx;
            let bot = c01[k] + (c11[k] - c01[k]) * fx;
            out[k] = top + (bot - top) * fy;
        }
        Ok(out)
    }
}

#[inline]
pub fn cubic(c: &[f64; 4], sigma: f64) -> f64 {
    ((c[0] * sigma + c[1]) * sigma + c[2]) * sigma + c[3]
}

#[inline]
pub fn cubic_second_derivative(c: &[f64; 4], sigma: f64) -> f64 {
    6.0 * c[0] * sigma + 2.0 * c[1]
}

pub fn fit_poly(stack: &Stack, m: &PolyParamMatrix) -> Result<PolyField> {
    let (w, h) = (stack[0].width(), stack[0].height());
    if stack.iter().any(|r| r.width() != w || r.height() != h) {
        return Err(Error::Size("stack rasters differ in size".into()));
    }
    let n = w * h;
    let mut coef = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mm = m.m;
    let [c0, c1, c2, c3] = &mut coef;
    c0.par_iter_mut()
        .zip(c1.par_iter_mut())
        .zip(c2.par_iter_mut().zip(c3.par_iter_mut()))
        .enumerate()
        .for_each(|(i, ((a, b), (c, d)))| {
            let s = Vector4::new(
                stack[0].data()[i] as f64,
                stack[1].data()[i] as f64,
                stack[2].data()[i] as f64,
                stack[3].data()[i] as f64,
            );
            let r = mm * s;
            *a = r[0];
            *b = r[1];
            *c = r[2];
            *d = r[3];
        });
    Ok(PolyField {
        width: w,
        height: h,
        coef,
    })
}

/// Cubic evaluation at `(x, y, σ)` with bilinear coefficient interpolation.
pub fn eval_poly(pf: &PolyField, x: f64, y: f64, sigma: f64) -> Result<f64> {
    Ok(cubic(&pf.coefficients_bilinear(x, y)?, sigma))
}

/// Scales where the cubic is stationary, labelled by the sign of its
/// second derivative. Roots outside `range` are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtremalScales {
    pub sigma_max: Option<f64>,
    pub sigma_min: Option<f64>,
}

pub fn extremal_scales_of(c: &[f64; 4], range: (f64, f64)) -> ExtremalScales {
    // f'(σ) = 3a σ² + 2b σ + c
    let (qa, qb, qc) = (3.0 * c[0], 2.0 * c[1], c[2]);
    let mut roots: Vec<f64> = Vec::with_capacity(2);
    let scale = qa.abs().max(qb.abs()).max(qc.abs());
    if scale == 0.0 {
        return ExtremalScales::default();
    }
    if qa.abs() <= 1e-12 * scale {
        if qb != 0.0 {
            roots.push(-qc / qb);
        }
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return ExtremalScales::default();
        }
        let sq = disc.sqrt();
        let q = -0.5 * (qb + qb.signum() * sq);
        if q != 0.0 {
            roots.push(q / qa);
            roots.push(qc / q);
        } else {
            roots.push(0.0);
            roots.push(0.0);
        }
    }
    let mut out = ExtremalScales::default();
    for r in roots {
        if !(r >= range.0 && r <= range.1) {
            continue;
        }
        let f2 = cubic_second_derivative(c, r);
        if f2 < 0.0 && out.sigma_max.is_none() {
            out.sigma_max = Some(r);
        } else if f2 > 0.0 && out.sigma_min.is_none() {
            out.sigma_min = Some(r);
        }
    }
    out
}

pub fn ladder_range() -> (f64, f64) {
    (LADDER[0], LADDER[3])
}

pub fn solve_extremal_scales(pf: &PolyField, x: usize, y: usize) -> Result<ExtremalScales> {
    if x >= pf.width || y >= pf.height {
        return Err(Error::OutOfBounds {
            x: x as f64,
            y: y as f64,
        });
    }
    Ok(extremal_scales_of(&pf.coefficients_at(x, y), ladder_range()))
}

/// Cubic fits of every stack of one octave.
#[derive(Debug, Clone)]
pub struct OctaveFields {
    pub level: usize,
    pub log: PolyField,
    pub log_dx: PolyField,
    pub log_dy: PolyField,
    pub log_dxx: PolyField,
    pub log_dxy: PolyField,
    pub log_dyy: PolyField,
    pub grad_x: PolyField,
    pub grad_y: PolyField,
}

impl OctaveFields {
    pub fn width(&self) -> usize {
        self.log.width()
    }

    pub fn height(&self) -> usize {
        self.log.height()
    }

    pub fn fit(oct: &Octave, m: &PolyParamMatrix) -> Result<Self> {
        let st = oct
            .stacks
            .as_ref()
            .ok_or_else(|| Error::Size("derivative stacks not built".into()))?;
        Ok(OctaveFields {
            level: oct.level,
            log: fit_poly(&st.log, m)?,
            log_dx: fit_poly(&st.log_dx, m)?,
            log_dy: fit_poly(&st.log_dy, m)?,
            log_dxx: fit_poly(&st.log_dxx, m)?,
            log_dxy: fit_poly(&st.log_dxy, m)?,
            log_dyy: fit_poly(&st.log_dyy, m)?,
            grad_x: fit_poly(&st.grad_x, m)?,
            grad_y: fit_poly(&st.grad_y, m)?,
        })
    }
}

/// Complete scale space of one image under one affine channel.
#[derive(Debug, Clone)]
pub struct ScaleSpace {
    pub a: Matrix2<f64>,
    pub width: usize,
    pub height: usize,
    pub octaves: Vec<OctaveFields>,
}

impl ScaleSpace {
    /// Builds pyramid, stacks and cubic fits; raw stacks are released as each
    /// octave is fitted.
    pub fn build(img: &GrayImage, a: &Matrix2<f64>, n_octaves: usize) -> Result<Self> {
        let params = AffineParams::new(*a, LADDER[0])?;
        let pyramid = build_pyramid(img, &params, n_octaves)?;
        let m = compute_poly_param_matrix(LADDER)?;
        let mut octaves = Vec::with_capacity(pyramid.len());
        for mut oct in pyramid {
            log_and_derivatives(&mut oct, &params)?;
            octaves.push(OctaveFields::fit(&oct, &m)?);
        }
        Ok(ScaleSpace {
            a: *a,
            width: img.width(),
            height: img.height(),
            octaves,
        })
    }
}
