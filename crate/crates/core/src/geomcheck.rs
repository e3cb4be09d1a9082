//! DISTRAT: geometric consistency of a match set from the statistics of its
//! log distance ratios.
//!
//! Outlier pairs are modelled with coordinate differences drawn from an
//! isotropic normal in both images, which makes the squared distance ratio
//! F(2, 2) distributed. With `S ~ F(2, 2)` the CDF is `s / (1 + s)`, so
//! `z = ½ ln S` has CDF `e^{2z} / (1 + e^{2z}) = (1 + tanh z) / 2` and density
//! `½ sech² z`.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

pub const MIN_MATCHES: usize = 5;
pub const MIN_DISTANCE: f64 = 1e-6;
pub const MIN_HISTOGRAM_MASS: f64 = 25.0;
pub const LOW_CONFIDENCE_BELOW: f64 = 6.0;
const POWER_MAX_ITER: usize = 200;
const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistratConfig {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
}

impl Default for DistratConfig {
    fn default() -> Self {
        DistratConfig {
            bins: 25,
            lo: -2.5,
            hi: 2.5,
            alpha: 0.01,
        }
    }
}

impl DistratConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 5 {
            return Err(Error::Config(format!("{} bins, need at least 5", self.bins)));
        }
        if !(self.lo < self.hi && self.lo.is_finite() && self.hi.is_finite()) {
            return Err(Error::Config(format!("bad LDR range [{}, {}]", self.lo, self.hi)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

/// Pairwise LDRs, row-major upper triangle (`i < j`); `None` marks pairs
/// with a near-coincident point in either image.
#[derive(Debug, Clone, PartialEq)]
pub struct Ldr {
    pub n: usize,
    pub values: Vec<Option<f64>>,
}

impl Ldr {
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.values[self.index(i, j)],
            std::cmp::Ordering::Greater => self.values[self.index(j, i)],
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn valid(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

/// `ln(‖Xi − Xj‖ / ‖Yi − Yj‖)` for every pair.
pub fn compute_ldr(xs: &[(f64, f64)], ys: &[(f64, f64)]) -> Result<Ldr> {
    if xs.len() != ys.len() {
        return Err(Error::Size(format!("{} vs {} match coordinates", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < MIN_MATCHES {
        return Err(Error::TooFewMatches { got: n, need: MIN_MATCHES });
    }
    if !xs.iter().chain(ys).all(|p| p.0.is_finite() && p.1.is_finite()) {
        return Err(Error::Numeric("non-finite match coordinate".into()));
    }
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (xs[i].0 - xs[j].0).hypot(xs[i].1 - xs[j].1);
            let dy = (ys[i].0 - ys[j].0).hypot(ys[i].1 - ys[j].1);
            values.push(if dx < MIN_DISTANCE || dy < MIN_DISTANCE {
                None
            } else {
                Some((dx / dy).ln())
            });
        }
    }
    Ok(Ldr { n, values })
}

/// Shifts to zero mean and scales to unit RMS radius.
pub fn normalize_points(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if pts.is_empty() {
        return Vec::new();
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let rms = (pts.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n).sqrt();
    let s = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    pts.iter().map(|p| ((p.0 - mx) * s, (p.1 - my) * s)).collect()
}

/// Equal-width bin of `z`, with values beyond the range clipped to the end bins.
pub fn bin_of(z: f64, bins: usize, lo: f64, hi: f64) -> usize {
    let t = ((z - lo) / (hi - lo) * bins as f64).floor();
    if t < 0.0 {
        0
    } else if t >= bins as f64 {
        bins - 1
    } else {
        t as usize
    }
}

pub fn ldr_histogram(ldr: &Ldr, bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for z in ldr.valid() {
        h[bin_of(z, bins, lo, hi)] += 1.0;
    }
    h
}

fn edge(k: usize, bins: usize, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * k as f64 / bins as f64
}

/// Probability of an outlier LDR falling in each bin.
pub fn outlier_pdf(bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..bins)
        .map(|k| 0.5 * (edge(k + 1, bins, lo, hi).tanh() - edge(k, bins, lo, hi).tanh()))
        .collect()
}

/// Outlier density of the LDR at `z`.
pub fn ldr_density(z: f64) -> f64 {
    0.5 / z.cosh().powi(2)
}

/// `β = Σ h f / Σ f²` and the outlier-normal residual `d = h − β f`.
pub fn estimate_beta(h: &[f64], f: &[f64]) -> Result<(f64, Vec<f64>)> {
    let ff: f64 = f.iter().map(|v| v * v).sum();
    if !(ff > 0.0) || h.len() != f.len() {
        return Err(Error::Model("degenerate outlier model".into()));
    }
    let beta = h.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / ff;
    let d = h.iter().zip(f).map(|(a, b)| a - beta * b).collect();
    Ok((beta, d))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoodnessOfFit {
    pub chi2: f64,
    pub dof: usize,
    pub critical: f64,
    /// The histogram departs from the outlier model.
    pub pass: bool,
}

/// Upper `alpha` quantile of χ² with `dof` degrees of freedom.
pub fn chi2_critical(dof: usize, alpha: f64) -> Result<f64> {
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(dist.inverse_cdf(1.0 - alpha))
}

/// Pearson's test of `h` against the outlier model renormalized over the range.
pub fn goodness_of_fit(h: &[f64], f: &[f64], alpha: f64) -> Result<GoodnessOfFit> {
    let total: f64 = h.iter().sum();
    if total < MIN_HISTOGRAM_MASS {
        return Err(Error::TooFewMatches {
            got: total as usize,
            need: MIN_HISTOGRAM_MASS as usize,
        });
    }
    let fsum: f64 = f.iter().sum();
    if !(fsum > 0.0) {
        return Err(Error::Model("outlier model has no mass in range".into()));
    }
    // Merge starved bins forward; a starved tail joins the last group.
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let (mut ho, mut he) = (0.0, 0.0);
    for (&hk, &fk) in h.iter().zip(f) {
        ho += hk;
        he += total * fk / fsum;
        if he >= 1e-9 {
            groups.push((ho, he));
            ho = 0.0;
            he = 0.0;
        }
    }
    if ho > 0.0 || he > 0.0 {
        match groups.last_mut() {
            Some(g) => {
                g.0 += ho;
                g.1 += he;
            }
            None => return Err(Error::Model("outlier model has no mass in range".into())),
        }
    }
    if groups.len() < 2 {
        return Err(Error::Model("fewer than two usable bins".into()));
    }
    let chi2 = groups.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = groups.len() - 1;
    let critical = chi2_critical(dof, alpha)?;
    Ok(GoodnessOfFit {
        chi2,
        dof,
        critical,
        pass: chi2 > critical,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdrModel {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub f: Vec<f64>,
    pub h: Vec<f64>,
    pub beta: f64,
    pub d: Vec<f64>,
}

impl LdrModel {
    pub fn fit(ldr: &Ldr, cfg: &DistratConfig) -> Result<Self> {
        cfg.validate()?;
        let f = outlier_pdf(cfg.bins, cfg.lo, cfg.hi);
        let h = ldr_histogram(ldr, cfg.bins, cfg.lo, cfg.hi);
        let (beta, d) = estimate_beta(&h, &f)?;
        Ok(LdrModel {
            bins: cfg.bins,
            lo: cfg.lo,
            hi: cfg.hi,
            f,
            h,
            beta,
            d,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InlierResult {
    pub m_hat: f64,
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    /// Sorted ascending.
    pub inlier_indices: Vec<usize>,
    pub low_confidence: bool,
}

/// Dominant (largest algebraic) eigenpair of a symmetric matrix.
fn power_iteration(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let iterate = |shift: f64| -> Result<(f64, DVector<f64>)> {
        let n = m.nrows();
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut prev = f64::NAN;
        for _ in 0..POWER_MAX_ITER {
            let mut w = m * &v;
            w.axpy(shift, &v, 1.0);
            let mu = v.dot(&w);
            let norm = w.norm();
            if !(norm > 0.0) || !mu.is_finite() {
                return Err(Error::Numeric("power iteration collapsed".into()));
            }
            v = w / norm;
            if (mu - prev).abs() <= POWER_TOL * mu.abs() {
                return Ok((mu - shift, v));
            }
            prev = mu;
        }
        Err(Error::Numeric(format!("power iteration did not converge in {POWER_MAX_ITER} steps")))
    };
    let (mu, v) = iterate(0.0)?;
    if mu >= 0.0 {
        return Ok((mu, v));
    }
    // The dominant eigenvalue is negative; shifting by its magnitude makes
    // the largest algebraic one dominant.
    iterate(-mu)
}

/// Inlier count and membership from the dominant eigenvector of the
/// outlier-normal matrix.
pub fn extract_inliers(ldr: &Ldr, model: &LdrModel) -> Result<InlierResult> {
    let n = ldr.n;
    if n < MIN_MATCHES {
        return Err(Error::TooFewMatches { got: n, need: MIN_MATCHES });
    }
    let dmax = model.d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(dmax > 0.0) {
        return Err(Error::NoInlierStructure(dmax));
    }
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if let Some(z) = ldr.get(i, j) {
                let v = model.d[bin_of(z, model.bins, model.lo, model.hi)];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    let (mu, mut r) = power_iteration(&m)?;
    let imax = r.iamax();
    if r[imax] < 0.0 {
        r.neg_mut();
    }
    let m_hat = 1.0 + mu / dmax;
    let count = ((m_hat + 0.5).floor().max(1.0) as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    let mut inlier_indices = order[..count].to_vec();
    inlier_indices.sort_unstable();
    Ok(InlierResult {
        m_hat,
        eigenvalue: mu,
        eigenvector: r.iter().copied().collect(),
        inlier_indices,
        low_confidence: m_hat < LOW_CONFIDENCE_BELOW,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub n: usize,
    pub model: LdrModel,
    pub test: GoodnessOfFit,
    /// Present when the pair passed the fast test.
    pub inliers: Option<InlierResult>,
}

impl Verification {
    pub fn m_hat(&self) -> f64 {
        self.inliers.as_ref().map_or(0.0, |r| r.m_hat)
    }

    /// `N m_hat beta chi2 pass|reject`.
    pub fn summary(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {}",
            self.n,
            self.m_hat(),
            self.model.beta,
            self.test.chi2,
            if self.test.pass { "pass" } else { "reject" }
        )
    }
}

/// Full check of the correspondences `xs[i] ↔ ys[i]`.
pub fn verify(xs: &[(f64, f64)], ys: &[(f64, f64)], cfg: &DistratConfig) -> Result<Verification> {
    cfg.validate()?;
    let ldr = compute_ldr(&normalize_points(xs), &normalize_points(ys))?;
    let model = LdrModel::fit(&ldr, cfg)?;
    let test = goodness_of_fit(&model.h, &model.f, cfg.alpha)?;
    let inliers = if test.pass { Some(extract_inliers(&ldr, &model)?) } else { None };
    Ok(Verification {
        n: xs.len(),
        model,
        test,
        inliers,
    })
}
