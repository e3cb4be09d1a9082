//! AIFDd: affine Gaussian gradients, gradient relocation, orientation
//! assignment and the 4x4x8 quantized histogram descriptor.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::affine::{polar_rotation, rotation};
use crate::detector::Feature;
use crate::error::{Error, Result};
use crate::scalespace::{cubic, from_original, ladder_range, OctaveFields, ScaleSpace, GRADIENT_NORM_POWER};

pub const DESCRIPTOR_LEN: usize = 128;
pub const ORIENTATION_BINS: usize = 36;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorConfig {
    /// Half side of the orientation square, in units of σ.
    pub ori_half_extent: f64,
    /// Std of the orientation window, in units of σ.
    pub ori_window: f64,
    /// Orientation sample spacing, in units of σ.
    pub ori_spacing: f64,
    pub peak_ratio: f64,
    /// Half side of the descriptor patch, in units of σ.
    pub half_extent: f64,
    pub side: usize,
    pub clamp: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            ori_half_extent: 1.5,
            ori_window: 1.5,
            ori_spacing: 0.25,
            peak_ratio: 0.8,
            half_extent: 6.0,
            side: 16,
            clamp: 0.2,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(pos(self.ori_half_extent) && pos(self.ori_window) && pos(self.ori_spacing) && pos(self.half_extent)) {
            return Err(Error::Config("descriptor extents must be positive".into()));
        }
        if self.side == 0 || self.side % 4 != 0 {
            return Err(Error::Config(format!("patch side {} must be a positive multiple of 4", self.side)));
        }
        if !(self.peak_ratio > 0.0 && self.peak_ratio <= 1.0) || !pos(self.clamp) {
            return Err(Error::Config("peak ratio must be in (0, 1] and clamp positive".into()));
        }
        Ok(())
    }
}

/// Canonical-frame Gaussian gradient of one octave at a fixed scale.
#[derive(Debug, Clone, Copy)]
pub struct GradientField<'a> {
    fields: &'a OctaveFields,
    /// Octave-relative scale.
    pub sigma: f64,
    pub a: Matrix2<f64>,
}

impl<'a> GradientField<'a> {
    pub fn width(&self) -> usize {
        self.fields.width()
    }

    pub fn height(&self) -> usize {
        self.fields.height()
    }

    /// Gradient at an octave-pixel position, `None` outside the raster.
    pub fn at(&self, x: f64, y: f64) -> Option<Vector2<f64>> {
        let gx = self.fields.grad_x.coefficients_bilinear(x, y).ok()?;
        let gy = self.fields.grad_y.coefficients_bilinear(x, y).ok()?;
        let k = self.sigma.powi(GRADIENT_NORM_POWER);
        Some(Vector2::new(cubic(&gx, self.sigma) / k, cubic(&gy, self.sigma) / k))
    }

    /// Magnitude and orientation in `[0, 2π)`.
    pub fn polar(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let g = self.at(x, y)?;
        Some((g.norm(), wrap_angle(g[1].atan2(g[0]))))
    }
}

pub fn wrap_angle(t: f64) -> f64 {
    let r = t.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

pub fn affine_gradient_field<'a>(space: &'a ScaleSpace, octave: usize, sigma: f64) -> Result<GradientField<'a>> {
    let (lo, hi) = ladder_range();
    if !(sigma >= lo - 1e-9 && sigma <= hi + 1e-9) {
        return Err(Error::InvalidScale(sigma));
    }
    let fields = space
        .octaves
        .get(octave)
        .ok_or_else(|| Error::Size(format!("octave {octave} not built")))?;
    Ok(GradientField {
        fields,
        sigma,
        a: space.a,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPatch {
    pub side: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

/// Samples `side × side` gradients on `(u, v) ∈ [−h, h]²` (units of σ) mapped
/// to `p + a′ (u, v) σ`, and expresses them in the frame steered by the
/// rotation part of `A⁻¹ a′`. Position and σ are octave-relative. Any sample
/// outside the raster rejects the patch.
pub fn relocate_patch(
    field: &GradientField,
    x: f64,
    y: f64,
    sigma: f64,
    a_prime: &Matrix2<f64>,
    half_extent: f64,
    side: usize,
) -> Result<GradientPatch> {
    sample_patch(field, x, y, sigma, a_prime, half_extent, side, |px, py| Err(Error::OutOfBounds { x: px, y: py }))
}

/// As `relocate_patch`, but samples outside the raster contribute a zero gradient.
pub fn relocate_patch_partial(
    field: &GradientField,
    x: f64,
    y: f64,
    sigma: f64,
    a_prime: &Matrix2<f64>,
    half_extent: f64,
    side: usize,
) -> Result<GradientPatch> {
    sample_patch(field, x, y, sigma, a_prime, half_extent, side, |_, _| Ok(Vector2::zeros()))
}

#[allow(clippy::too_many_arguments)]
fn sample_patch(
    field: &GradientField,
    x: f64,
    y: f64,
    sigma: f64,
    a_prime: &Matrix2<f64>,
    half_extent: f64,
    side: usize,
    missing: impl Fn(f64, f64) -> Result<Vector2<f64>>,
) -> Result<GradientPatch> {
    let a_inv = field
        .a
        .try_inverse()
        .ok_or(Error::DegenerateTransform { det: field.a.determinant() })?;
    let steer = polar_rotation(&(a_inv * a_prime)).transpose();
    let n = side * side;
    let mut gx = Vec::with_capacity(n);
    let mut gy = Vec::with_capacity(n);
    let step = 2.0 * half_extent / side as f64;
    for j in 0..side {
        let v = -half_extent + (j as f64 + 0.5) * step;
        for i in 0..side {
            let u = -half_extent + (i as f64 + 0.5) * step;
            let d = a_prime * Vector2::new(u, v) * sigma;
            let (px, py) = (x + d[0], y + d[1]);
            let g = match field.at(px, py) {
                Some(g) => g,
                None => missing(px, py)?,
            };
            let s = steer * g;
            gx.push(s[0]);
            gy.push(s[1]);
        }
    }
    Ok(GradientPatch { side, gx, gy })
}

/// `ΔM = −½(M₊ − M₋) / (½(M₊ + M₋) − M)`.
pub fn peak_offset(m_minus: f64, m: f64, m_plus: f64) -> f64 {
    let den = 0.5 * (m_plus + m_minus) - m;
    if den == 0.0 {
        return 0.0;
    }
    -0.5 * (m_plus - m_minus) / den
}

/// Peaks of a circular histogram: global maximum plus local maxima within
/// `ratio` of it, each refined by `peak_offset` (offsets beyond ½ bin are
/// dropped). Returned as angles in `[0, 2π)`.
pub fn histogram_peaks(hist: &[f64], ratio: f64) -> Vec<f64> {
    let n = hist.len();
    let max = hist.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for k in 0..n {
        let (l, c, r) = (hist[(k + n - 1) % n], hist[k], hist[(k + 1) % n]);
        // Ties on the left keep one orientation per plateau.
        if !(c >= l && c > r) || c < ratio * max {
            continue;
        }
        let mut d = peak_offset(l, c, r);
        if !(d.abs() <= 0.5) {
            d = 0.0;
        }
        out.push(wrap_angle((k as f64 + d) * TAU / n as f64));
    }
    out
}

pub fn smooth_circular(hist: &[f64]) -> Vec<f64> {
    let n = hist.len();
    (0..n)
        .map(|k| 0.25 * hist[(k + n - 1) % n] + 0.5 * hist[k] + 0.25 * hist[(k + 1) % n])
        .collect()
}

/// 36-bin orientation histogram over the relocated square around the point.
pub fn orientation_histogram(field: &GradientField, x: f64, y: f64, sigma: f64, cfg: &DescriptorConfig) -> Result<Vec<f64>> {
    let steps = (cfg.ori_half_extent / cfg.ori_spacing).round() as usize;
    let side = 2 * steps + 1;
    let half = steps as f64 * cfg.ori_spacing;
    // Pixel-centred grid including the centre sample.
    let patch = relocate_patch(field, x, y, sigma, &field.a, half + 0.5 * cfg.ori_spacing, side)?;
    let mut hist = vec![0.0; ORIENTATION_BINS];
    let w2 = 2.0 * cfg.ori_window * cfg.ori_window;
    for j in 0..side {
        let v = -half + j as f64 * cfg.ori_spacing;
        for i in 0..side {
            let u = -half + i as f64 * cfg.ori_spacing;
            let k = j * side + i;
            let (gx, gy) = (patch.gx[k], patch.gy[k]);
            let m = gx.hypot(gy);
            if m == 0.0 {
                continue;
            }
            let w = m * (-(u * u + v * v) / w2).exp();
            let b = wrap_angle(gy.atan2(gx)) / TAU * ORIENTATION_BINS as f64;
            let b0 = b.floor();
            let f = b - b0;
            let i0 = (b0 as usize) % ORIENTATION_BINS;
            hist[i0] += w * (1.0 - f);
            hist[(i0 + 1) % ORIENTATION_BINS] += w * f;
        }
    }
    Ok(hist)
}

/// Dominant orientations (radians) of a feature, in the canonical frame.
pub fn assign_orientations(field: &GradientField, x: f64, y: f64, sigma: f64, cfg: &DescriptorConfig) -> Result<Vec<f64>> {
    let hist = orientation_histogram(field, x, y, sigma, cfg)?;
    Ok(histogram_peaks(&smooth_circular(&hist), cfg.peak_ratio))
}

/// Quantized descriptor plus the pre-quantization unit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDescriptor {
    pub values: [u8; DESCRIPTOR_LEN],
    pub unit: Vec<f64>,
}

/// Normalize, clamp at `clamp`, renormalize, quantize as `round(512 v)` capped at 255.
pub fn normalize_quantize(v: &[f64], clamp: f64) -> Result<RawDescriptor> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric("zero-norm descriptor".into()));
    }
    let mut u: Vec<f64> = v.iter().map(|x| (x / norm).min(clamp)).collect();
    let n2 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= n2);
    let mut values = [0u8; DESCRIPTOR_LEN];
    for (q, x) in values.iter_mut().zip(&u) {
        *q = (512.0 * x).round().clamp(0.0, 255.0) as u8;
    }
    Ok(RawDescriptor { values, unit: u })
}

/// 4x4 cells x 8 orientations with trilinear assignment and a Gaussian
/// window of std half the patch width.
pub fn build_descriptor(patch: &GradientPatch, clamp: f64) -> Result<RawDescriptor> {
    let side = patch.side;
    if side == 0 || side % 4 != 0 || patch.gx.len() != side * side || patch.gy.len() != side * side {
        return Err(Error::Size(format!("invalid patch of side {side}")));
    }
    let per_cell = side as f64 / 4.0;
    let half = side as f64 / 2.0;
    let sw2 = 2.0 * half * half;
    let mut hist = [0.0f64; DESCRIPTOR_LEN];
    for j in 0..side {
        for i in 0..side {
            let k = j * side + i;
            let (gx, gy) = (patch.gx[k], patch.gy[k]);
            let m = gx.hypot(gy);
            if m == 0.0 {
                continue;
            }
            let (du, dv) = (i as f64 + 0.5 - half, j as f64 + 0.5 - half);
            let w = m * (-(du * du + dv * dv) / sw2).exp();
            let cx = (i as f64 + 0.5) / per_cell - 0.5;
            let cy = (j as f64 + 0.5) / per_cell - 0.5;
            let ob = wrap_angle(gy.atan2(gx)) / TAU * 8.0;
            let (x0, y0, o0) = (cx.floor(), cy.floor(), ob.floor());
            let (fx, fy, fo) = (cx - x0, cy - y0, ob - o0);
            for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                if !(0.0..4.0).contains(&yy) {
                    continue;
                }
                for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                    if !(0.0..4.0).contains(&xx) {
                        continue;
                    }
                    for (oo, wo) in [(o0, 1.0 - fo), (o0 + 1.0, fo)] {
                        let o = (oo as usize) % 8;
                        hist[(yy as usize * 4 + xx as usize) * 8 + o] += w * wx * wy * wo;
                    }
                }
            }
        }
    }
    normalize_quantize(&hist, clamp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    /// Index of the described feature in its list.
    pub feature: usize,
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub theta: f64,
    pub a: Matrix2<f64>,
    pub values: [u8; DESCRIPTOR_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Border,
    Flat,
    ZeroNorm,
    Channel,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Border => "border",
            DropReason::Flat => "flat",
            DropReason::ZeroNorm => "zero-norm",
            DropReason::Channel => "channel",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescribeOutput {
    pub descriptors: Vec<Descriptor>,
    /// Orientations per input feature (empty when dropped).
    pub orientations: Vec<Vec<f64>>,
    pub dropped: Vec<(usize, DropReason)>,
}

fn describe_one(
    space: &ScaleSpace,
    f: &Feature,
    index: usize,
    cfg: &DescriptorConfig,
) -> std::result::Result<(Vec<f64>, Vec<Descriptor>), DropReason> {
    if f.a != space.a {
        return Err(DropReason::Channel);
    }
    let s = (1usize << f.octave) as f64;
    let sigma = f.sigma / s;
    let (x, y) = from_original(f.octave, f.x, f.y);
    let field = affine_gradient_field(space, f.octave, sigma).map_err(|_| DropReason::Border)?;
    let thetas = assign_orientations(&field, x, y, sigma, cfg).map_err(|_| DropReason::Border)?;
    if thetas.is_empty() {
        return Err(DropReason::Flat);
    }
    let mut out = Vec::with_capacity(thetas.len());
    for &theta in &thetas {
        let a_prime = space.a * rotation(theta);
        let patch = relocate_patch_partial(&field, x, y, sigma, &a_prime, cfg.half_extent, cfg.side)
            .map_err(|_| DropReason::Border)?;
        let raw = build_descriptor(&patch, cfg.clamp).map_err(|_| DropReason::ZeroNorm)?;
        out.push(Descriptor {
            feature: index,
            x: f.x,
            y: f.y,
            sigma: f.sigma,
            theta,
            a: f.a,
            values: raw.values,
        });
    }
    Ok((thetas, out))
}

/// Describes every feature detected under `space`'s channel. Features from
/// other channels are reported as dropped.
pub fn describe(features: &[Feature], space: &ScaleSpace, cfg: &DescriptorConfig) -> Result<DescribeOutput> {
    cfg.validate()?;
    let results: Vec<_> = features
        .par_iter()
        .enumerate()
        .map(|(i, f)| describe_one(space, f, i, cfg))
        .collect();
    let mut out = DescribeOutput {
        orientations: vec![Vec::new(); features.len()],
        ..Default::default()
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((thetas, descs)) => {
                out.orientations[i] = thetas;
                out.descriptors.extend(descs);
            }
            Err(reason) => out.dropped.push((i, reason)),
        }
    }
    Ok(out)
}

/// Ellipse `a x² + 2 b x y + c y² = 1` of the disk of radius 3σ mapped by `A`.
pub fn region_ellipse(sigma: f64, a: &Matrix2<f64>) -> (f64, f64, f64) {
    let cov = a * a.transpose() * (9.0 * sigma * sigma);
    let m = cov.try_inverse().unwrap_or_else(Matrix2::zeros);
    (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)])
}

/// Smallest signed difference between two angles, in `(−π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}
