use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use affina::image::{save_pgm, GrayImage};
use affina::synth::{textured_scene, tilt_view};
use tempfile::TempDir;

fn affina(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affina"))
        .args(args)
        .env_remove("AFFINA_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = affina(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn constant_image_gives_empty_feature_file() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("flat.pgm");
    save_pgm(&GrayImage::filled(96, 96, 0.5), &img).unwrap();
    let feats = dir.path().join("feats.txt");
    ok(&["detect", p(&img), "--out", p(&feats)]);
    assert_eq!(std::fs::read_to_string(&feats).unwrap(), "affina-features\n0\n");
}

#[test]
fn malformed_sequence_is_a_domain_error() {
    let dir = TempDir::new().unwrap();
    save_pgm(&GrayImage::filled(64, 64, 0.5), dir.path().join("img1.pgm")).unwrap();
    save_pgm(&GrayImage::filled(64, 64, 0.5), dir.path().join("img2.pgm")).unwrap();
    std::fs::write(dir.path().join("H1to2p"), "1 0 0\n0 1\n").unwrap();
    let out = affina(&["evaluate", p(dir.path()), "--out", p(&dir.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset error"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(affina(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(affina(&["detect", "x.png"]).status.code(), Some(2));
    assert_eq!(affina(&["--threads", "0", "selftest"]).status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "octaves = 3\nunknown_key = 1\n").unwrap();
    let out = affina(&["--config", p(&cfg), "selftest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let out = Command::new(env!("CARGO_BIN_EXE_affina"))
        .arg("selftest")
        .env("AFFINA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_domain_error() {
    let dir = TempDir::new().unwrap();
    let out = affina(&["detect", p(&dir.path().join("nope.png")), "--out", p(&dir.path().join("f.txt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 6);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

struct Pair {
    _dir: TempDir,
    root: PathBuf,
}

impl Pair {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// A textured scene and a tilted view of it, plus the view's homography.
fn warped_pair() -> (Pair, affina::synth::Homography) {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let img = textured_scene(200, 160, 21);
    let (view, h) = tilt_view(&img, 1.5, 0.6).unwrap();
    save_pgm(&img, root.join("a.pgm")).unwrap();
    save_pgm(&view, root.join("b.pgm")).unwrap();
    (Pair { _dir: dir, root }, h)
}

fn run_pipeline(pair: &Pair, threads: &str, tag: &str) -> Vec<Vec<u8>> {
    let f = |n: &str| pair.path(&format!("{tag}-{n}"));
    let t = ["--threads", threads];
    for side in ["a", "b"] {
        let img = pair.path(&format!("{side}.pgm"));
        ok(&[&t[..], &["detect", p(&img), "--out", p(&f(&format!("feats-{side}.txt")))]].concat());
        ok(&[
            &t[..],
            &["describe", p(&img), p(&f(&format!("feats-{side}.txt"))), "--out", p(&f(&format!("desc-{side}.txt")))],
        ]
        .concat());
    }
    ok(&[&t[..], &["match", p(&f("desc-a.txt")), p(&f("desc-b.txt")), "--out", p(&f("matches.txt"))]].concat());
    let v = ok(&[
        &t[..],
        &["verify", p(&f("matches.txt")), p(&f("desc-a.txt")), p(&f("desc-b.txt")), "--out", p(&f("inliers.txt"))],
    ]
    .concat());
    let mut files: Vec<Vec<u8>> = ["feats-a.txt", "feats-b.txt", "desc-a.txt", "desc-b.txt", "matches.txt", "inliers.txt"]
        .iter()
        .map(|n| std::fs::read(f(n)).unwrap())
        .collect();
    files.push(v.stdout);
    files
}

#[test]
fn pipeline_end_to_end_and_deterministic() {
    let (pair, h) = warped_pair();
    let one = run_pipeline(&pair, "1", "t1");
    let text = |i: usize| String::from_utf8(one[i].clone()).unwrap();

    let summary = text(6);
    assert!(summary.trim_end().ends_with("pass"), "{summary}");
    let inliers: Vec<usize> = text(5).lines().map(|l| l.parse().unwrap()).collect();
    assert!(!inliers.is_empty());

    // Inliers should be geometrically right under the known homography.
    let da = affina::io::parse_descriptors(&text(2)).unwrap();
    let db = affina::io::parse_descriptors(&text(3)).unwrap();
    let matches = affina::io::parse_matches(&text(4)).unwrap();
    let good = inliers
        .iter()
        .filter(|&&k| {
            let m = matches[k];
            let (x, y) = h.apply(da[m.index_a].x, da[m.index_a].y);
            (x - db[m.index_b].x).hypot(y - db[m.index_b].y) < 3.0
        })
        .count();
    assert!(good as f64 >= 0.9 * inliers.len() as f64, "{good} of {}", inliers.len());

    assert_eq!(run_pipeline(&pair, "1", "t1b"), one);
    assert_eq!(run_pipeline(&pair, "4", "t4"), one);
}

#[test]
fn config_file_and_flags_apply() {
    let (pair, _) = warped_pair();
    let img = pair.path("a.pgm");
    let cfg = pair.path("run.cfg");
    std::fs::write(&cfg, "# identity only\nchannels = identity\ncontrast = 0.02\n").unwrap();
    let count = |args: &[&str]| {
        let out = pair.path("f.txt");
        ok(&[args, &["detect", p(&img), "--out", p(&out)]].concat());
        let feats = affina::io::parse_features(&std::fs::read_to_string(out).unwrap()).unwrap();
        assert!(feats.iter().all(|f| f.a.is_identity(0.0)));
        feats.len()
    };
    let strict = count(&["--config", p(&cfg)]);
    let loose = count(&["--config", p(&cfg), "--contrast", "0.005"]);
    assert!(strict < loose, "{strict} vs {loose}");
    assert_eq!(count(&["--channels", "1@0", "--contrast", "0.005"]), loose);
}
