//! AIFD: extremal scales from the LoG cubic, the Harris/Hessian eigenvalue
//! extremum test, edge rejection and sub-pixel refinement.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::affine::{check_transform, sym_eigenvalues, tilt_transform};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalespace::{
    cubic, extremal_scales_of, ladder_range, octaves_that_fit, to_original, ExtremalScales,
    OctaveFields, PolyField, ScaleSpace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Max,
    Min,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Max => "max",
            Kind::Min => "min",
        }
    }
}

impl std::str::FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Kind::Max),
            "min" => Ok(Kind::Min),
            _ => Err(Error::Parse(format!("unknown feature kind {s:?}"))),
        }
    }
}

/// Detected interest point. Position and scale are in original-image units.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub kind: Kind,
    pub octave: usize,
    /// σ²-normalized LoG value at the extremum.
    pub response: f64,
    /// Affine channel the feature was detected under.
    pub a: Matrix2<f64>,
    /// Filled by the descriptor stage.
    pub orientations: Vec<f64>,
}

impl Feature {
    /// Radius of the circle with the same area as the channel-mapped scale disk.
    pub fn image_scale(&self) -> f64 {
        self.sigma * self.a.determinant().abs().sqrt()
    }
}

/// Hessian and Harris matrices of the LoG response, in the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMatrices {
    pub gradient: Vector2<f64>,
    pub hessian: Matrix2<f64>,
    pub harris: Matrix2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub channels: Vec<Matrix2<f64>>,
    pub edge_ratio: f64,
    /// Absolute floor on |response|.
    pub contrast_floor: f64,
    /// Relative gate: fraction of the channel's median |response|.
    pub contrast_rel: f64,
    /// Upper bound on octaves; fewer are used when the image is small.
    pub octaves: usize,
    /// Harris window radius in octave pixels; 0 is the pointwise outer product.
    pub harris_window: usize,
    /// Pixels skipped along each octave border.
    pub border: usize,
    pub max_refine_iter: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: default_channels(),
            edge_ratio: 10.0,
            contrast_floor: 0.005,
            contrast_rel: 0.024,
            octaves: 5,
            harris_window: 0,
            border: 2,
            max_refine_iter: 5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("at least one channel is required".into()));
        }
        for a in &self.channels {
            check_transform(a)?;
        }
        if !(self.edge_ratio > 0.0 && self.edge_ratio.is_finite()) {
            return Err(Error::Config(format!("edge ratio {} must be positive", self.edge_ratio)));
        }
        if !(self.contrast_floor >= 0.0 && self.contrast_rel >= 0.0) {
            return Err(Error::Config("contrast thresholds must be non-negative".into()));
        }
        if self.octaves == 0 {
            return Err(Error::Config("octaves must be at least 1".into()));
        }
        Ok(())
    }
}

/// Identity plus tilts {√2, 2} at longitudes {0°, 45°, 90°, 135°}.
pub fn default_channels() -> Vec<Matrix2<f64>> {
    let mut out = vec![Matrix2::identity()];
    for t in [SQRT_2, 2.0] {
        for k in 0..4 {
            out.push(tilt_transform(t, k as f64 * FRAC_PI_4));
        }
    }
    out
}

/// Channel set for tilts `tilts` (t = 1 contributes the identity once).
pub fn tilt_channels(tilts: &[f64], longitudes: &[f64]) -> Vec<Matrix2<f64>> {
    let mut out = Vec::new();
    for &t in tilts {
        if (t - 1.0).abs() < 1e-12 {
            out.push(Matrix2::identity());
            continue;
        }
        for &phi in longitudes {
            out.push(tilt_transform(t, phi));
        }
    }
    out
}

pub fn default_longitudes() -> Vec<f64> {
    vec![0.0, FRAC_PI_4, FRAC_PI_2, 3.0 * FRAC_PI_4]
}

fn fields_at(pf: &PolyField, x: f64, y: f64, sigma: f64) -> Result<f64> {
    Ok(cubic(&pf.coefficients_bilinear(x, y)?, sigma))
}

fn gradient_at(f: &OctaveFields, x: f64, y: f64, sigma: f64) -> Result<Vector2<f64>> {
    Ok(Vector2::new(
        fields_at(&f.log_dx, x, y, sigma)?,
        fields_at(&f.log_dy, x, y, sigma)?,
    ))
}

fn hessian_at(f: &OctaveFields, x: f64, y: f64, sigma: f64) -> Result<Matrix2<f64>> {
    let xx = fields_at(&f.log_dxx, x, y, sigma)?;
    let xy = fields_at(&f.log_dxy, x, y, sigma)?;
    let yy = fields_at(&f.log_dyy, x, y, sigma)?;
    Ok(Matrix2::new(xx, xy, xy, yy))
}

pub fn local_matrices(
    f: &OctaveFields,
    x: f64,
    y: f64,
    sigma: f64,
    window_radius: usize,
) -> Result<LocalMatrices> {
    let r = window_radius as f64;
    if x < r || y < r || x > (f.width() - 1) as f64 - r || y > (f.height() - 1) as f64 - r {
        return Err(Error::OutOfBounds { x, y });
    }
    let gradient = gradient_at(f, x, y, sigma)?;
    let hessian = hessian_at(f, x, y, sigma)?;
    let harris = if window_radius == 0 {
        gradient * gradient.transpose()
    } else {
        let std = 1.5 * sigma;
        let ri = window_radius as isize;
        let mut acc = Matrix2::zeros();
        let mut wsum = 0.0;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let d2 = (dx * dx + dy * dy) as f64;
                let w = (-d2 / (2.0 * std * std)).exp();
                let g = gradient_at(f, x + dx as f64, y + dy as f64, sigma)?;
                acc += g * g.transpose() * w;
                wsum += w;
            }
        }
        acc / wsum
    };
    Ok(LocalMatrices {
        gradient,
        hessian,
        harris,
    })
}

/// `¼ (min ψ)² > max ν`, then the sign of `max ψ` picks the kind.
pub fn extremum_test(m: &LocalMatrices) -> Option<Kind> {
    let (psi_lo, psi_hi) = sym_eigenvalues(&m.hessian);
    let (_, nu_hi) = sym_eigenvalues(&m.harris);
    if !(0.25 * psi_lo * psi_lo > nu_hi) {
        return None;
    }
    if psi_hi < 0.0 {
        Some(Kind::Max)
    } else if psi_hi > 0.0 {
        Some(Kind::Min)
    } else {
        None
    }
}

/// Keeps `H` iff `Det > 0` and `Tr² / Det < (r + 1)² / r`.
pub fn edge_response_filter(h: &Matrix2<f64>, r_max: f64) -> bool {
    let det = h.determinant();
    if !(det > 0.0) {
        return false;
    }
    let tr = h.trace();
    tr * tr / det < (r_max + 1.0) * (r_max + 1.0) / r_max
}

/// Candidate in octave coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub kind: Kind,
}

fn scale_of(e: &ExtremalScales, kind: Kind) -> Option<f64> {
    match kind {
        Kind::Max => e.sigma_max,
        Kind::Min => e.sigma_min,
    }
}

fn in_interior(f: &OctaveFields, x: f64, y: f64, border: usize) -> bool {
    let b = border as f64;
    x >= b && y >= b && x <= (f.width() - 1) as f64 - b && y <= (f.height() - 1) as f64 - b
}

/// Newton refinement `Δξ = −H⁻¹ g`, `Δη = A Δξ`, re-centring while any
/// component of the offset exceeds one half.
pub fn refine_subpixel(
    f: &OctaveFields,
    a: &Matrix2<f64>,
    cand: Candidate,
    border: usize,
    max_iter: usize,
) -> Option<Candidate> {
    let (mut px, mut py) = (cand.x.round(), cand.y.round());
    let mut sigma = cand.sigma;
    for _ in 0..max_iter.max(1) {
        if !in_interior(f, px, py, border) {
            return None;
        }
        let g = gradient_at(f, px, py, sigma).ok()?;
        let h = hessian_at(f, px, py, sigma).ok()?;
        let scale = h.abs().max();
        // Responses live on [0, 1] images; below this the Hessian is roundoff.
        if !(h.determinant().abs() > 1e-12 * scale * scale) || scale < 1e-5 {
            return None;
        }
        let dxi = -h.try_inverse()? * g;
        let deta = a * dxi;
        if !(deta[0].is_finite() && deta[1].is_finite()) {
            return None;
        }
        if deta[0].abs() > 0.5 || deta[1].abs() > 0.5 {
            // Move at most one pixel per axis per step.
            px += deta[0].round().clamp(-1.0, 1.0);
            py += deta[1].round().clamp(-1.0, 1.0);
            let c = f.log.coefficients_bilinear(px, py).ok()?;
            sigma = scale_of(&extremal_scales_of(&c, ladder_range()), cand.kind)?;
            continue;
        }
        let (x, y) = (px + deta[0], py + deta[1]);
        if !in_interior(f, x, y, border) {
            return None;
        }
        let c = f.log.coefficients_bilinear(x, y).ok()?;
        let sigma = scale_of(&extremal_scales_of(&c, ladder_range()), cand.kind)?;
        return Some(Candidate {
            x,
            y,
            sigma,
            kind: cand.kind,
        });
    }
    None
}

/// Extremum test, kind agreement and edge filter at a (possibly sub-pixel) point.
pub fn passes_checks(
    f: &OctaveFields,
    c: &Candidate,
    edge_ratio: f64,
    window: usize,
) -> Option<LocalMatrices> {
    let m = local_matrices(f, c.x, c.y, c.sigma, window).ok()?;
    if extremum_test(&m)? != c.kind || !edge_response_filter(&m.hessian, edge_ratio) {
        return None;
    }
    Some(m)
}

/// Refined candidates of one octave with their responses, in scan order.
pub fn octave_candidates(f: &OctaveFields, a: &Matrix2<f64>, cfg: &DetectorConfig) -> Vec<(Candidate, f64)> {
    let border = cfg.border.max(cfg.harris_window + 1);
    let (w, h) = (f.width(), f.height());
    if w <= 2 * border || h <= 2 * border {
        return Vec::new();
    }
    let range = ladder_range();
    (border..h - border)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut row = Vec::new();
            for x in border..w - border {
                let c = f.log.coefficients_at(x, y);
                let e = extremal_scales_of(&c, range);
                for (sigma, kind) in [(e.sigma_max, Kind::Max), (e.sigma_min, Kind::Min)] {
                    let Some(sigma) = sigma else { continue };
                    if cubic(&c, sigma).abs() < cfg.contrast_floor {
                        continue;
                    }
                    let cand = Candidate {
                        x: x as f64,
                        y: y as f64,
                        sigma,
                        kind,
                    };
                    if passes_checks(f, &cand, cfg.edge_ratio, cfg.harris_window).is_none() {
                        continue;
                    }
                    let Some(r) = refine_subpixel(f, a, cand, border, cfg.max_refine_iter) else {
                        continue;
                    };
                    if passes_checks(f, &r, cfg.edge_ratio, cfg.harris_window).is_none() {
                        continue;
                    }
                    let Ok(resp) = fields_at(&f.log, r.x, r.y, r.sigma) else { continue };
                    if resp.abs() < cfg.contrast_floor {
                        continue;
                    }
                    row.push((r, resp));
                }
            }
            row
        })
        .collect()
}

/// Candidates of every octave of one channel, mapped to original coordinates.
pub fn detect_in_space(space: &ScaleSpace, cfg: &DetectorConfig) -> Vec<Feature> {
    let mut out = Vec::new();
    for f in &space.octaves {
        let scale = (1usize << f.level) as f64;
        for (c, resp) in octave_candidates(f, &space.a, cfg) {
            let (x, y) = to_original(f.level, c.x, c.y);
            out.push(Feature {
                x,
                y,
                sigma: c.sigma * scale,
                kind: c.kind,
                octave: f.level,
                response: resp,
                a: space.a,
                orientations: Vec::new(),
            });
        }
    }
    out
}

/// `max(floor, rel × median |response|)`.
pub fn contrast_threshold(features: &[Feature], cfg: &DetectorConfig) -> f64 {
    if features.is_empty() || cfg.contrast_rel == 0.0 {
        return cfg.contrast_floor;
    }
    let mut r: Vec<f64> = features.iter().map(|f| f.response.abs()).collect();
    let mid = r.len() / 2;
    let (_, m, _) = r.select_nth_unstable_by(mid, f64::total_cmp);
    cfg.contrast_floor.max(cfg.contrast_rel * *m)
}

fn order_key(a: &Feature, b: &Feature) -> std::cmp::Ordering {
    a.octave
        .cmp(&b.octave)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(a.sigma.total_cmp(&b.sigma))
}

/// Indices of features kept after merging duplicates (within `dist` px and
/// `rel_scale` relative scale), strongest |response| first.
pub fn dedup_indices(features: &[Feature], dist: f64, rel_scale: f64) -> Vec<usize> {
    use std::collections::HashMap;
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&i, &j| {
        features[j]
            .response
            .abs()
            .total_cmp(&features[i].response.abs())
            .then_with(|| order_key(&features[i], &features[j]))
    });
    let cell = dist.max(1e-9);
    let key = |f: &Feature| ((f.x / cell).floor() as i64, (f.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept = Vec::new();
    for i in order {
        let f = &features[i];
        let (cx, cy) = key(f);
        let mut dup = false;
        'search: for gy in cy - 1..=cy + 1 {
            for gx in cx - 1..=cx + 1 {
                if let Some(list) = grid.get(&(gx, gy)) {
                    for &j in list {
                        let g = &features[j];
                        let d2 = (f.x - g.x).powi(2) + (f.y - g.y).powi(2);
                        let (sf, sg) = (f.image_scale(), g.image_scale());
                        let ds = (sf - sg).abs() / sf.max(sg);
                        if d2 <= dist * dist && ds <= rel_scale {
                            dup = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !dup {
            grid.entry((cx, cy)).or_default().push(i);
            kept.push(i);
        }
    }
    kept
}

pub const DEDUP_DIST: f64 = 2.0;
pub const DEDUP_SCALE: f64 = 0.2;

/// Contrast gate over the candidates of one channel.
pub fn gate_channel(features: Vec<Feature>, cfg: &DetectorConfig) -> Vec<Feature> {
    let t = contrast_threshold(&features, cfg);
    features.into_iter().filter(|f| f.response.abs() >= t).collect()
}

/// Cross-channel deduplication; returns kept indices in output order.
pub fn merge_order(features: &[Feature]) -> Vec<usize> {
    let mut keep = dedup_indices(features, DEDUP_DIST, DEDUP_SCALE);
    keep.sort_by(|&i, &j| order_key(&features[i], &features[j]));
    keep
}

pub fn finalize(features: Vec<Feature>) -> Vec<Feature> {
    merge_order(&features).into_iter().map(|i| features[i].clone()).collect()
}

pub fn octave_count(img: &GrayImage, a: &Matrix2<f64>, cfg: &DetectorConfig) -> Result<usize> {
    let n = octaves_that_fit(img.width(), img.height(), a, cfg.octaves);
    if n == 0 {
        return Err(Error::Size(format!(
            "{}x{} image is too small for detection",
            img.width(),
            img.height()
        )));
    }
    Ok(n)
}

pub fn detect(img: &GrayImage, cfg: &DetectorConfig) -> Result<Vec<Feature>> {
    cfg.validate()?;
    let mut all = Vec::new();
    for a in &cfg.channels {
        let space = ScaleSpace::build(img, a, octave_count(img, a, cfg)?)?;
        all.extend(gate_channel(detect_in_space(&space, cfg), cfg));
    }
    Ok(finalize(all))
}
