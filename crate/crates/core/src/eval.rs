//! Repeatability and matching-score evaluation on Oxford-style sequences.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix3};
use rayon::prelude::*;

use crate::descriptor::{region_ellipse, DescriptorConfig};
use crate::detector::{DetectorConfig, Feature};
use crate::error::{Error, Result};
use crate::image::{load_image, GrayImage};
use crate::matcher::{match_descriptors, DescriptorBytes, MatcherConfig};
use crate::pipeline::{extract, Extraction};
use crate::synth::Homography;

const OVERLAP_GRID: usize = 48;
const IMAGE_EXTENSIONS: [&str; 5] = ["ppm", "pgm", "png", "pnm", "jpg"];

pub struct Sequence {
    pub images: Vec<GrayImage>,
    /// `homographies[k]` maps image 1 to image k + 1; the first is the identity.
    pub homographies: Vec<Homography>,
}

pub fn parse_homography(text: &str) -> Result<Homography> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Dataset(format!("bad homography entry {t:?}"))))
        .collect::<Result<_>>()?;
    if v.len() != 9 {
        return Err(Error::Dataset(format!("homography has {} entries, expected 9", v.len())));
    }
    Homography::new(Matrix3::from_row_slice(&v)).map_err(|e| Error::Dataset(e.to_string()))
}

fn find_image(dir: &Path, k: usize) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| dir.join(format!("img{k}.{e}")))
        .find(|p| p.is_file())
}

/// Loads `img1..imgN` and `H1to2p..H1toNp` from `dir`.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut images = Vec::new();
    let mut homographies = vec![Homography::identity()];
    while let Some(path) = find_image(dir, images.len() + 1) {
        let k = images.len() + 1;
        images.push(load_image(&path)?);
        if k > 1 {
            let hp = dir.join(format!("H1to{k}p"));
            let text = std::fs::read_to_string(&hp)
                .map_err(|e| Error::Dataset(format!("{}: {e}", hp.display())))?;
            homographies.push(parse_homography(&text)?);
        }
    }
    if images.len() < 2 {
        return Err(Error::Dataset(format!("{} holds fewer than two images", dir.display())));
    }
    Ok(Sequence { images, homographies })
}

/// Filled ellipse `(p − c)ᵀ M (p − c) ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub cx: f64,
    pub cy: f64,
    pub m: Matrix2<f64>,
}

impl Region {
    pub fn of(f: &Feature) -> Region {
        let (a, b, c) = region_ellipse(f.sigma, &f.a);
        Region {
            cx: f.x,
            cy: f.y,
            m: Matrix2::new(a, b, b, c),
        }
    }

    /// First-order image of the region under `h`.
    pub fn mapped(&self, h: &Homography) -> Region {
        let (cx, cy) = h.apply(self.cx, self.cy);
        let ji = h.jacobian(self.cx, self.cy).try_inverse().unwrap_or_else(Matrix2::zeros);
        Region {
            cx,
            cy,
            m: ji.transpose() * self.m * ji,
        }
    }

    /// Half-widths of the bounding box.
    pub fn extent(&self) -> (f64, f64) {
        let inv = self.m.try_inverse().unwrap_or_else(Matrix2::zeros);
        (inv[(0, 0)].max(0.0).sqrt(), inv[(1, 1)].max(0.0).sqrt())
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        self.m[(0, 0)] * dx * dx + 2.0 * self.m[(0, 1)] * dx * dy + self.m[(1, 1)] * dy * dy <= 1.0
    }
}

/// `1 − |A ∩ B| / |A ∪ B|`, estimated on a grid over the union's bounding box.
pub fn overlap_error(a: &Region, b: &Region) -> f64 {
    let (ax, ay) = a.extent();
    let (bx, by) = b.extent();
    if (a.cx - b.cx).abs() > ax + bx || (a.cy - b.cy).abs() > ay + by {
        return 1.0;
    }
    let (x0, x1) = ((a.cx - ax).min(b.cx - bx), (a.cx + ax).max(b.cx + bx));
    let (y0, y1) = ((a.cy - ay).min(b.cy - by), (a.cy + ay).max(b.cy + by));
    let (sx, sy) = ((x1 - x0) / OVERLAP_GRID as f64, (y1 - y0) / OVERLAP_GRID as f64);
    let (mut ina, mut inb, mut both) = (0usize, 0usize, 0usize);
    for j in 0..OVERLAP_GRID {
        let y = y0 + (j as f64 + 0.5) * sy;
        for i in 0..OVERLAP_GRID {
            let x = x0 + (i as f64 + 0.5) * sx;
            let (p, q) = (a.contains(x, y), b.contains(x, y));
            ina += p as usize;
            inb += q as usize;
            both += (p && q) as usize;
        }
    }
    let union = ina + inb - both;
    if union == 0 {
        return 1.0;
    }
    1.0 - both as f64 / union as f64
}

fn inside(x: f64, y: f64, size: (usize, usize)) -> bool {
    x >= 0.0 && y >= 0.0 && x <= size.0 as f64 - 1.0 && y <= size.1 as f64 - 1.0
}

/// Candidate corresponding pairs of two feature sets under `h`.
pub struct Overlaps {
    pub visible_a: Vec<usize>,
    pub visible_b: Vec<usize>,
    /// `(i, j) → overlap error`, only for errors below the threshold.
    pub errors: HashMap<(usize, usize), f64>,
}

pub fn overlaps(
    fa: &[Feature],
    fb: &[Feature],
    h: &Homography,
    size_a: (usize, usize),
    size_b: (usize, usize),
    overlap_max: f64,
) -> Result<Overlaps> {
    let hinv = h.inverse()?;
    let visible_a: Vec<usize> = (0..fa.len())
        .filter(|&i| {
            let (x, y) = h.apply(fa[i].x, fa[i].y);
            inside(x, y, size_b)
        })
        .collect();
    let visible_b: Vec<usize> = (0..fb.len())
        .filter(|&j| {
            let (x, y) = hinv.apply(fb[j].x, fb[j].y);
            inside(x, y, size_a)
        })
        .collect();
    let rb: Vec<(usize, Region, (f64, f64))> = visible_b
        .iter()
        .map(|&j| {
            let r = Region::of(&fb[j]);
            (j, r, r.extent())
        })
        .collect();
    let mut by_x: Vec<usize> = (0..rb.len()).collect();
    by_x.sort_by(|&p, &q| rb[p].1.cx.total_cmp(&rb[q].1.cx).then(p.cmp(&q)));
    let xs: Vec<f64> = by_x.iter().map(|&p| rb[p].1.cx).collect();
    let max_ext = rb.iter().map(|r| r.2 .0).fold(0.0, f64::max);
    let found: Vec<Vec<((usize, usize), f64)>> = visible_a
        .par_iter()
        .map(|&i| {
            let ra = Region::of(&fa[i]).mapped(h);
            let (ex, _) = ra.extent();
            let lo = xs.partition_point(|&x| x < ra.cx - ex - max_ext);
            let hi = xs.partition_point(|&x| x <= ra.cx + ex + max_ext);
            by_x[lo..hi]
                .iter()
                .filter_map(|&p| {
                    let (j, r, _) = &rb[p];
                    let e = overlap_error(&ra, r);
                    (e < overlap_max).then_some(((i, *j), e))
                })
                .collect()
        })
        .collect();
    Ok(Overlaps {
        visible_a,
        visible_b,
        errors: found.into_iter().flatten().collect(),
    })
}

/// One-to-one assignment, lowest overlap error first.
pub fn assign(errors: &HashMap<(usize, usize), f64>) -> Vec<(usize, usize, f64)> {
    let mut all: Vec<(usize, usize, f64)> = errors.iter().map(|(&(i, j), &e)| (i, j, e)).collect();
    all.sort_by(|p, q| p.2.total_cmp(&q.2).then(p.0.cmp(&q.0)).then(p.1.cmp(&q.1)));
    greedy(all)
}

fn greedy(sorted: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64)> {
    let mut used_a = std::collections::HashSet::new();
    let mut used_b = std::collections::HashSet::new();
    sorted
        .into_iter()
        .filter(|&(i, j, _)| {
            if used_a.contains(&i) || used_b.contains(&j) {
                return false;
            }
            used_a.insert(i);
            used_b.insert(j);
            true
        })
        .collect()
}

pub fn correspondences(
    fa: &[Feature],
    fb: &[Feature],
    h: &Homography,
    size_a: (usize, usize),
    size_b: (usize, usize),
    overlap_max: f64,
) -> Result<Vec<(usize, usize, f64)>> {
    Ok(assign(&overlaps(fa, fb, h, size_a, size_b, overlap_max)?.errors))
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub detector: DetectorConfig,
    pub descriptor: DescriptorConfig,
    pub matcher: MatcherConfig,
    pub overlap_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            detector: DetectorConfig::default(),
            descriptor: DescriptorConfig::default(),
            matcher: MatcherConfig::default(),
            overlap_max: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairReport {
    /// Index (1-based) of the second image of the pair.
    pub target: usize,
    pub repeatability: f64,
    pub n_corr: usize,
    pub matching_score: f64,
    pub n_matches: usize,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Metrics for one image pair from already extracted features and descriptors.
pub fn evaluate_pair(
    ea: &Extraction,
    eb: &Extraction,
    h: &Homography,
    size_a: (usize, usize),
    size_b: (usize, usize),
    cfg: &EvalConfig,
    target: usize,
) -> Result<PairReport> {
    let ov = overlaps(&ea.features, &eb.features, h, size_a, size_b, cfg.overlap_max)?;
    let denom = ov.visible_a.len().min(ov.visible_b.len());
    let n_corr = assign(&ov.errors).len();
    let da: Vec<DescriptorBytes> = ea.descriptors.iter().map(|d| d.values).collect();
    let db: Vec<DescriptorBytes> = eb.descriptors.iter().map(|d| d.values).collect();
    let n_matches = if da.is_empty() || db.len() < 2 {
        0
    } else {
        let mut correct: Vec<(usize, usize, f64)> = match_descriptors(&da, &db, &cfg.matcher)?
            .into_iter()
            .map(|m| (ea.descriptors[m.index_a].feature, eb.descriptors[m.index_b].feature, m.distance))
            .filter(|(i, j, _)| ov.errors.contains_key(&(*i, *j)))
            .collect();
        correct.sort_by(|p, q| p.2.total_cmp(&q.2).then(p.0.cmp(&q.0)).then(p.1.cmp(&q.1)));
        greedy(correct).len()
    };
    Ok(PairReport {
        target,
        repeatability: ratio(n_corr, denom),
        n_corr,
        matching_score: ratio(n_matches, denom),
        n_matches,
    })
}

fn size(img: &GrayImage) -> (usize, usize) {
    (img.width(), img.height())
}

/// Evaluates image 1 against every other image of the sequence.
pub fn evaluate(seq: &Sequence, cfg: &EvalConfig) -> Result<Vec<PairReport>> {
    let first = extract(&seq.images[0], &cfg.detector, &cfg.descriptor)?;
    (1..seq.images.len())
        .into_par_iter()
        .map(|k| {
            let ek = extract(&seq.images[k], &cfg.detector, &cfg.descriptor)?;
            evaluate_pair(
                &first,
                &ek,
                &seq.homographies[k],
                size(&seq.images[0]),
                size(&seq.images[k]),
                cfg,
                k + 1,
            )
        })
        .collect()
}

pub const CSV_HEADER: &str = "pair,repeatability,n_corr,matching_score,n_matches";

pub fn report_csv(rows: &[PairReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "1-{},{:.6},{},{:.6},{}",
            r.target, r.repeatability, r.n_corr, r.matching_score, r.n_matches
        );
    }
    s
}

pub fn emit_report(rows: &[PairReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::tilt_transform;
    use crate::detector::Kind;
    use crate::synth::textured_scene;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn feat(x: f64, y: f64, sigma: f64) -> Feature {
        Feature {
            x,
            y,
            sigma,
            kind: Kind::Max,
            octave: 0,
            response: 1.0,
            a: Matrix2::identity(),
            orientations: vec![],
        }
    }

    fn circle(cx: f64, cy: f64, r: f64) -> Region {
        Region {
            cx,
            cy,
            m: Matrix2::identity() / (r * r),
        }
    }

    /// Lens area of two circles.
    fn lens(r1: f64, r2: f64, d: f64) -> f64 {
        if d >= r1 + r2 {
            return 0.0;
        }
        if d <= (r1 - r2).abs() {
            return PI * r1.min(r2).powi(2);
        }
        let a = r1 * r1 * ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).acos();
        let b = r2 * r2 * ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).acos();
        let c = 0.5 * ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)).sqrt();
        a + b - c
    }

    #[test]
    fn homography_parsing() {
        assert_eq!(parse_homography("1 0 0 0 1 0 0 0 1").unwrap(), Homography::identity());
        let h = parse_homography("2 0 3\n0 2 -1\n0 0 2\n").unwrap();
        assert_eq!(h.apply(1.0, 1.0), (2.5, 0.5));
        assert!(matches!(parse_homography("1 0 0 0 1 0 0 0"), Err(Error::Dataset(_))));
        assert!(matches!(parse_homography("1 0 0 0 x 0 0 0 1"), Err(Error::Dataset(_))));
    }

    #[test]
    fn overlap_matches_circle_lens() {
        for (r1, r2, d) in [(10.0, 10.0, 0.0), (10.0, 10.0, 5.0), (10.0, 7.0, 6.0), (8.0, 12.0, 3.0), (5.0, 5.0, 11.0)] {
            let e = overlap_error(&circle(0.0, 0.0, r1), &circle(d, 0.0, r2));
            let inter = lens(r1, r2, d);
            let expect = 1.0 - inter / (PI * (r1 * r1 + r2 * r2) - inter);
            assert!((e - expect).abs() < 0.03, "{r1} {r2} {d}: {e} vs {expect}");
        }
        assert_eq!(overlap_error(&circle(3.0, 4.0, 6.0), &circle(3.0, 4.0, 6.0)), 0.0);
    }

    #[test]
    fn mapped_region_follows_affine_homography() {
        let f = feat(10.0, 20.0, 2.0);
        let h = Homography::new(Matrix3::new(2.0, 0.0, 5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let r = Region::of(&f).mapped(&h);
        assert_eq!((r.cx, r.cy), (25.0, 20.0));
        let (ex, ey) = r.extent();
        assert!((ex - 12.0).abs() < 1e-9 && (ey - 6.0).abs() < 1e-9);
        let g = Feature { a: tilt_transform(2.0, 0.0), ..f };
        let (gx, gy) = Region::of(&g).extent();
        assert!((gx - 12.0).abs() < 1e-9 && (gy - 6.0).abs() < 1e-9);
    }

    #[test]
    fn identical_sets_fully_repeat() {
        let fs: Vec<Feature> = (0..40).map(|k| feat(5.0 + (k % 8) as f64 * 11.0, 6.0 + (k / 8) as f64 * 13.0, 1.6 + 0.1 * k as f64)).collect();
        let c = correspondences(&fs, &fs, &Homography::identity(), (100, 80), (100, 80), 0.4).unwrap();
        assert_eq!(c.len(), 40);
        assert!(c.iter().all(|&(i, j, e)| i == j && e == 0.0));
    }

    #[test]
    fn distant_features_never_correspond() {
        let fa = vec![feat(10.0, 10.0, 2.0)];
        let fb = vec![feat(40.0, 10.0, 2.0)];
        assert!(correspondences(&fa, &fb, &Homography::identity(), (60, 30), (60, 30), 0.4).unwrap().is_empty());
    }

    #[test]
    fn invisible_features_are_excluded() {
        let fa = vec![feat(10.0, 10.0, 2.0), feat(55.0, 10.0, 2.0)];
        let shift = Homography::new(Matrix3::new(1.0, 0.0, 10.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let ov = overlaps(&fa, &fa, &shift, (60, 30), (60, 30), 0.4).unwrap();
        assert_eq!(ov.visible_a, vec![0]);
        assert_eq!(ov.visible_b, vec![0, 1]);
    }

    #[test]
    fn csv_format() {
        assert_eq!(report_csv(&[]), format!("{CSV_HEADER}\n"));
        let r = PairReport {
            target: 2,
            repeatability: 0.5,
            n_corr: 10,
            matching_score: 1.0 / 3.0,
            n_matches: 7,
        };
        assert_eq!(report_csv(&[r]), format!("{CSV_HEADER}\n1-2,0.500000,10,0.333333,7\n"));
    }

    fn pair_of(img: &GrayImage, other: GrayImage, h: Homography) -> Sequence {
        Sequence {
            images: vec![img.clone(), other],
            homographies: vec![Homography::identity(), h],
        }
    }

    fn quick_cfg() -> EvalConfig {
        EvalConfig {
            detector: DetectorConfig {
                channels: vec![Matrix2::identity()],
                octaves: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn self_pair_scores() {
        let img = textured_scene(120, 100, 3);
        let rep = evaluate(&pair_of(&img, img.clone(), Homography::identity()), &quick_cfg()).unwrap();
        assert_eq!(rep[0].repeatability, 1.0);
        assert!(rep[0].matching_score >= 0.9, "{:?}", rep[0]);
        assert!(rep[0].n_matches <= rep[0].n_corr);
    }

    #[test]
    fn disjoint_views_score_zero() {
        let img = textured_scene(120, 100, 3);
        let away = Homography::new(Matrix3::new(1.0, 0.0, 500.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let rep = evaluate(&pair_of(&img, textured_scene(120, 100, 4), away), &quick_cfg()).unwrap();
        let r = rep[0];
        assert_eq!((r.repeatability, r.n_corr, r.matching_score, r.n_matches), (0.0, 0, 0.0, 0));
    }

    #[test]
    fn sequence_loading() {
        let dir = tempfile::tempdir().unwrap();
        let img = textured_scene(40, 30, 1);
        for k in 1..=3 {
            crate::image::save_pgm(&img, dir.path().join(format!("img{k}.pgm"))).unwrap();
        }
        std::fs::write(dir.path().join("H1to2p"), "1 0 0 0 1 0 0 0 1\n").unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Dataset(_))));
        std::fs::write(dir.path().join("H1to3p"), "1 0 2 0 1 0 0 0 1\n").unwrap();
        let s = load_sequence(dir.path()).unwrap();
        assert_eq!((s.images.len(), s.homographies.len()), (3, 3));
        assert_eq!(s.homographies[2].apply(0.0, 0.0), (2.0, 0.0));
        assert!(load_sequence(dir.path().join("missing")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn looser_overlap_never_loses_correspondences(seed in any::<u64>(), t1 in 0.05f64..0.9, t2 in 0.05f64..0.9) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gen = |n| -> Vec<Feature> {
                (0..n).map(|_| feat(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), rng.gen_range(1.0..4.0))).collect()
            };
            let (fa, fb) = (gen(30), gen(30));
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let h = Homography::identity();
            let a = correspondences(&fa, &fb, &h, (60, 60), (60, 60), lo).unwrap().len();
            let b = correspondences(&fa, &fb, &h, (60, 60), (60, 60), hi).unwrap().len();
            prop_assert!(a <= b);
        }
    }
}
