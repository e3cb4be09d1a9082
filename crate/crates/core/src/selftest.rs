//! Quick built-in oracle checks, run by `affina selftest`.

use std::time::Instant;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, FisherSnedecor};

use crate::affine::AffineParams;
use crate::detector::{extremum_test, Kind, LocalMatrices};
use crate::error::Result;
use crate::geomcheck::{outlier_pdf, verify, DistratConfig};
use crate::image::GrayImage;
use crate::matcher::{match_descriptors, DescriptorBytes, MatcherConfig};
use crate::scalespace::{blur, build_pyramid, eval_poly, fit_poly, log_and_derivatives, compute_poly_param_matrix, LADDER};
use crate::synth::textured_scene;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Hand-computed extremum cases: Hessian `[xx, xy, yy]`, Harris `[xx, xy, yy]`, expected label.
pub const EXTREMUM_CASES: [([f64; 3], [f64; 3], Option<Kind>); 9] = [
    ([-4.0, 0.0, -4.0], [1.0, 0.0, 1.0], Some(Kind::Max)),
    ([2.0, 0.0, 6.0], [0.5, 0.0, 0.5], Some(Kind::Min)),
    ([-1.0, 0.0, -1.0], [3.0, 0.0, 0.1], None),
    // ¼·(−2)² equals max ν = 1 exactly: strict inequality fails.
    ([-2.0, 0.0, -1.0], [1.0, 0.0, 0.0], None),
    // ψ = {−2, −4}, ν = {1.5, 0.5}: 4 > 1.5.
    ([-3.0, 1.0, -3.0], [1.0, 0.5, 1.0], Some(Kind::Max)),
    // ψ = {1, 4}, min ψ = 1: 0.25 > 0.2.
    ([4.0, 0.0, 1.0], [0.2, 0.0, 0.1], Some(Kind::Min)),
    // max ψ = 0 is neither.
    ([-4.0, 0.0, 0.0], [0.5, 0.0, 0.0], None),
    // Mixed signs with max ψ > 0.
    ([-4.0, 0.0, 4.0], [0.0, 0.0, 0.0], Some(Kind::Min)),
    ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], None),
];

pub fn case_matrices(h: [f64; 3], nu: [f64; 3]) -> LocalMatrices {
    LocalMatrices {
        gradient: Vector2::zeros(),
        hessian: Matrix2::new(h[0], h[1], h[1], h[2]),
        harris: Matrix2::new(nu[0], nu[1], nu[1], nu[2]),
    }
}

fn extremum_cases() -> Check {
    let bad: Vec<usize> = EXTREMUM_CASES
        .iter()
        .enumerate()
        .filter(|(_, (h, nu, want))| extremum_test(&case_matrices(*h, *nu)) != *want)
        .map(|(i, _)| i)
        .collect();
    Check::new(
        "extremum cases",
        bad.is_empty(),
        format!("{}/{} agree{}", EXTREMUM_CASES.len() - bad.len(), EXTREMUM_CASES.len(), if bad.is_empty() { String::new() } else { format!(", failing {bad:?}") }),
    )
}

/// Worst interpolation error of the cubic fits at the ladder scales, relative
/// to the raster's largest magnitude, over every stack of every octave.
pub fn poly_exactness(img: &GrayImage, a: &Matrix2<f64>, octaves: usize) -> Result<f64> {
    let p = AffineParams::new(*a, LADDER[0])?;
    let m = compute_poly_param_matrix(LADDER)?;
    let mut worst = 0.0f64;
    for mut oct in build_pyramid(img, &p, octaves)? {
        log_and_derivatives(&mut oct, &p)?;
        let st = oct.stacks.as_ref().expect("stacks just built");
        for stack in [&st.log, &st.log_dx, &st.log_dy, &st.log_dxx, &st.log_dxy, &st.log_dyy, &st.grad_x, &st.grad_y] {
            let pf = fit_poly(stack, &m)?;
            for (raster, &s) in stack.iter().zip(&LADDER) {
                let scale = (raster.max_abs() as f64).max(f64::MIN_POSITIVE);
                for y in 0..raster.height() {
                    for x in 0..raster.width() {
                        let got = eval_poly(&pf, x as f64, y as f64, s)?;
                        worst = worst.max((got - raster.get(x, y) as f64).abs() / scale);
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Largest interior difference between the incrementally blurred first
/// octave and direct single blurs of the input.
pub fn semigroup_gap(img: &GrayImage, a: &Matrix2<f64>, margin: usize) -> Result<f64> {
    let p = AffineParams::new(*a, LADDER[0])?;
    let pyr = build_pyramid(img, &p, 1)?;
    let mut worst = 0.0f64;
    for (g, &s) in pyr[0].gauss.iter().zip(&LADDER) {
        let direct = blur(img, a, s)?;
        for y in margin..img.height() - margin {
            for x in margin..img.width() - margin {
                worst = worst.max((g.get(x, y) - direct.get(x, y)).abs() as f64);
            }
        }
    }
    Ok(worst)
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    step(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
}

/// Largest per-bin gap between the closed-form outlier pdf and quadrature of
/// the F(2, 2) density pushed through `z = ½ ln S`, plus the worst asymmetry.
pub fn outlier_pdf_gaps(cfg: &DistratConfig) -> (f64, f64) {
    let fd = FisherSnedecor::new(2.0, 2.0).expect("valid F parameters");
    let density = |z: f64| {
        let s = (2.0 * z).exp();
        fd.pdf(s) * 2.0 * s
    };
    let f = outlier_pdf(cfg.bins, cfg.lo, cfg.hi);
    let w = (cfg.hi - cfg.lo) / cfg.bins as f64;
    let mut quad = 0.0f64;
    for (k, &p) in f.iter().enumerate() {
        let a = cfg.lo + w * k as f64;
        quad = quad.max((integrate(&density, a, a + w, 1e-14) - p).abs());
    }
    let sym = (0..f.len()).map(|k| (f[k] - f[f.len() - 1 - k]).abs()).fold(0.0, f64::max);
    (quad, sym)
}

fn outlier_pdf_check() -> Check {
    let (quad, sym) = outlier_pdf_gaps(&DistratConfig::default());
    Check::new(
        "outlier pdf",
        quad <= 1e-9 && sym <= 1e-12,
        format!("quadrature gap {quad:.2e}, asymmetry {sym:.2e}"),
    )
}

fn matcher_identity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set: Vec<DescriptorBytes> = (0..40)
        .map(|_| {
            let mut d = [0u8; 128];
            rng.fill(&mut d[..]);
            d
        })
        .collect();
    let ok = match match_descriptors(&set, &set, &MatcherConfig { ratio_max: 0.8, mutual: true }) {
        Ok(m) => m.len() == set.len() && m.iter().all(|x| x.index_a == x.index_b && x.distance == 0.0),
        Err(_) => false,
    };
    Check::new("matcher self-identity", ok, format!("{} descriptors", set.len()))
}

fn distrat_recovery(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let pts = |n: usize, rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.gen_range(0.0..512.0), rng.gen_range(0.0..512.0))).collect()
    };
    let x = pts(100, &mut rng);
    let (sn, cs) = 0.7f64.sin_cos();
    let mut y: Vec<(f64, f64)> = x[..50]
        .iter()
        .map(|&(u, v)| (1.2 * (cs * u - sn * v) + 30.0, 1.2 * (sn * u + cs * v) - 20.0))
        .collect();
    y.extend(pts(50, &mut rng));
    match verify(&x, &y, &DistratConfig::default()) {
        Ok(v) => match &v.inliers {
            Some(r) => {
                let hits = r.inlier_indices.iter().filter(|&&i| i < 50).count();
                let prec = hits as f64 / r.inlier_indices.len().max(1) as f64;
                Check::new(
                    "distrat recovery",
                    (r.m_hat - 50.0).abs() <= 10.0 && prec >= 0.9,
                    format!("m_hat {}, precision {prec:.3}", r.m_hat),
                )
            }
            None => Check::new("distrat recovery", false, "rejected by the fit test".into()),
        },
        Err(e) => Check::new("distrat recovery", false, e.to_string()),
    }
}

fn scale_space_checks() -> Vec<Check> {
    let img = textured_scene(96, 96, 3);
    let a = crate::affine::tilt_transform(2.0, 0.4);
    let poly = match poly_exactness(&img, &a, 1) {
        Ok(e) => Check::new("polynomial exactness", e <= 1e-6, format!("worst relative error {e:.2e}")),
        Err(e) => Check::new("polynomial exactness", false, e.to_string()),
    };
    let semi = match semigroup_gap(&img, &Matrix2::identity(), 24) {
        Ok(e) => Check::new("semi-group", e < 1e-3, format!("max interior gap {e:.2e}")),
        Err(e) => Check::new("semi-group", false, e.to_string()),
    };
    vec![poly, semi]
}

/// Runs every check; `seed` drives the randomized ones.
pub fn run_all(seed: u64) -> Vec<(Check, f64)> {
    let suites: [fn(u64) -> Vec<Check>; 5] = [
        |_| vec![extremum_cases()],
        |_| scale_space_checks(),
        |_| vec![outlier_pdf_check()],
        |s| vec![matcher_identity(s)],
        |s| vec![distrat_recovery(s)],
    ];
    let mut out = Vec::new();
    for s in suites {
        let t = Instant::now();
        let checks = s(seed);
        let secs = t.elapsed().as_secs_f64() / checks.len() as f64;
        out.extend(checks.into_iter().map(|c| (c, secs)));
    }
    out
}
