//! Deterministic procedural scenes and planar homography warps, used when no
//! real benchmark images are available.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// 3x3 planar homography mapping image-1 pixels to image-k pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) || m.determinant().abs() < 1e-12 {
            return Err(Error::Singular("homography".into()));
        }
        Ok(Homography(m / m[(2, 2)]))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| Error::Singular("homography".into()))?;
        Homography::new(inv)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let v = self.0 * Vector3::new(x, y, 1.0);
        (v[0] / v[2], v[1] / v[2])
    }

    /// Jacobian of the mapping at `(x, y)`, row-major `[[∂u/∂x, ∂u/∂y], [∂v/∂x, ∂v/∂y]]`.
    pub fn jacobian(&self, x: f64, y: f64) -> nalgebra::Matrix2<f64> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w;
        let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w;
        nalgebra::Matrix2::new(
            (m[(0, 0)] - u * m[(2, 0)]) / w,
            (m[(0, 1)] - u * m[(2, 1)]) / w,
            (m[(1, 0)] - v * m[(2, 0)]) / w,
            (m[(1, 1)] - v * m[(2, 1)]) / w,
        )
    }

    pub fn compose(&self, then: &Homography) -> Homography {
        Homography(then.0 * self.0 / (then.0 * self.0)[(2, 2)])
    }
}

/// Random blobs and ellipses over a smooth background, values in [0, 1].
pub fn textured_scene(width: usize, height: usize, seed: u64) -> GrayImage {
    textured_scene_with_density(width, height, seed, 90.0)
}

/// As `textured_scene`, with one shape per `px_per_shape` pixels.
pub fn textured_scene_with_density(width: usize, height: usize, seed: u64, px_per_shape: f64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gx, gy, g0) = (
        rng.gen_range(-0.2..0.2) / width as f64,
        rng.gen_range(-0.2..0.2) / height as f64,
        rng.gen_range(0.4..0.6),
    );
    let mut acc: Vec<f64> = (0..width * height)
        .map(|i| g0 + gx * (i % width) as f64 + gy * (i / width) as f64)
        .collect();
    let area = (width * height) as f64;
    let n_shapes = (area / px_per_shape).ceil() as usize;
    for _ in 0..n_shapes {
        let cx = rng.gen_range(-10.0..width as f64 + 10.0);
        let cy = rng.gen_range(-10.0..height as f64 + 10.0);
        // Log-uniform size between 1.5 and 14 px.
        let s = (rng.gen_range(1.5f64.ln()..14f64.ln())).exp();
        let elong = rng.gen_range(1.0..2.5);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(0.15..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let hard = rng.gen_bool(0.35);
        let (sn, cs) = theta.sin_cos();
        let (sa, sb) = (s * elong, s);
        let reach = 3.5 * sa;
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(width as f64 - 1.0)).max(0.0) as usize;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(height as f64 - 1.0)).max(0.0) as usize;
        if cx + reach < 0.0 || cy + reach < 0.0 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = (cs * dx + sn * dy) / sa;
                let v = (-sn * dx + cs * dy) / sb;
                let r2 = u * u + v * v;
                let val = if hard {
                    // Ellipse of radii (1.5 sa, 1.5 sb) with a one-pixel ramp.
                    let r = r2.sqrt() * 1.5;
                    let edge = (r - 1.5) * 1.5 * sb;
                    (0.5 - edge).clamp(0.0, 1.0)
                } else {
                    (-0.5 * r2).exp()
                };
                acc[y * width + x] += amp * val;
            }
        }
    }
    let data = acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    GrayImage::from_vec(width, height, data).expect("sized buffer")
}

/// Renders `dst(p) = src(H⁻¹ p)` with bilinear sampling; uncovered pixels get `fill`.
pub fn warp(src: &GrayImage, h: &Homography, width: usize, height: usize, fill: f32) -> Result<GrayImage> {
    let inv = h.inverse()?;
    Ok(GrayImage::from_fn(width, height, |x, y| {
        let (u, v) = inv.apply(x as f64, y as f64);
        src.sample_bilinear(u, v).unwrap_or(fill)
    }))
}

/// Homography of a plane seen at `tilt` (1 = frontal) along longitude `phi`,
/// centred on `(cx, cy)`, with a perspective term `persp`.
pub fn viewpoint_homography(tilt: f64, phi: f64, persp: f64, cx: f64, cy: f64) -> Homography {
    let r = |a: f64| {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    };
    let t = |x: f64, y: f64| Matrix3::new(1.0, 0.0, x, 0.0, 1.0, y, 0.0, 0.0, 1.0);
    let squash = Matrix3::new(1.0 / tilt, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    let p = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, persp, 0.0, 1.0);
    let m = t(cx, cy) * r(phi) * p * squash * r(-phi) * t(-cx, -cy);
    Homography::new(m).expect("well-conditioned viewpoint")
}

pub const GRAF_SIZE: (usize, usize) = (800, 640);
const GRAF_DENSITY: f64 = 400.0;

/// Stand-in for graf img1 when the real sequence is not available: same
/// size, comparable feature density.
pub fn graf_proxy(seed: u64) -> GrayImage {
    textured_scene_with_density(GRAF_SIZE.0, GRAF_SIZE.1, seed, GRAF_DENSITY)
}

/// `img` foreshortened by `tilt` along longitude `phi`, on a canvas sized to
/// the warped image; the homography maps `img` pixels to view pixels.
pub fn tilt_view(img: &GrayImage, tilt: f64, phi: f64) -> Result<(GrayImage, Homography)> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let base = viewpoint_homography(tilt, phi, 0.0, 0.5 * w, 0.5 * h);
    let corners = [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)].map(|(x, y)| base.apply(x, y));
    let (x0, y0) = corners.iter().fold((f64::INFINITY, f64::INFINITY), |a, p| (a.0.min(p.0), a.1.min(p.1)));
    let (x1, y1) = corners.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| (a.0.max(p.0), a.1.max(p.1)));
    let shift = Homography::new(Matrix3::new(1.0, 0.0, -x0.floor(), 0.0, 1.0, -y0.floor(), 0.0, 0.0, 1.0))?;
    let hm = base.compose(&shift);
    let (vw, vh) = ((x1 - x0.floor()).ceil() as usize + 1, (y1 - y0.floor()).ceil() as usize + 1);
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64;
    Ok((warp(img, &hm, vw, vh, mean as f32)?, hm))
}

/// Reference image plus five views of increasing obliquity, graf layout.
pub struct SyntheticSequence {
    pub reference: GrayImage,
    pub views: Vec<(GrayImage, Homography)>,
}

pub const SEQUENCE_TILTS: [f64; 5] = [1.15, 1.35, 1.6, 1.9, 2.3];

pub fn synthetic_sequence(width: usize, height: usize, seed: u64) -> Result<SyntheticSequence> {
    // Render a larger canvas so warped views stay covered.
    let pad = width.max(height) / 2;
    let (cw, ch) = (width + 2 * pad, height + 2 * pad);
    let canvas = textured_scene_with_density(cw, ch, seed, GRAF_DENSITY);
    let crop = Homography::new(Matrix3::new(
        1.0, 0.0, -(pad as f64), 0.0, 1.0, -(pad as f64), 0.0, 0.0, 1.0,
    ))?;
    let reference = warp(&canvas, &crop, width, height, 0.5)?;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let mut views = Vec::with_capacity(SEQUENCE_TILTS.len());
    for (k, &tilt) in SEQUENCE_TILTS.iter().enumerate() {
        let phi = 0.3 + 0.25 * k as f64;
        let persp = 1.5e-4 * (k as f64 + 1.0) / width as f64 * 100.0;
        let h = viewpoint_homography(tilt, phi, persp, cx, cy);
        let view = warp(&canvas, &crop.compose(&h), width, height, 0.5)?;
        views.push((view, h));
    }
    Ok(SyntheticSequence { reference, views })
}
