use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use affina::config::RunConfig;
use affina::detector::detect;
use affina::eval::{emit_report, evaluate, load_sequence};
use affina::geomcheck::verify;
use affina::image::load_image;
use affina::io;
use affina::matcher::match_descriptors;
use affina::pipeline::describe_features;
use affina::{selftest, Error};

#[derive(Parser)]
#[command(name = "affina", version, about = "Affine-invariant feature detection, description, matching and verification")]
struct Cli {
    /// key = value file applied on top of the defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads (overrides AFFINA_THREADS)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(flatten)]
    detector: DetectorFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DetectorFlags {
    /// `default`, `identity`, or a comma list of `t@phi_deg` / `a11:a12:a21:a22`
    #[arg(long, global = true)]
    channels: Option<String>,
    #[arg(long, global = true)]
    edge_ratio: Option<f64>,
    /// Absolute floor on |response|
    #[arg(long, global = true)]
    contrast: Option<f64>,
    #[arg(long, global = true)]
    octaves: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Detect features in an image
    Detect {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe previously detected features
    Describe {
        image: PathBuf,
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match two descriptor files
    Match {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Statistical geometric verification of a match file
    Verify {
        matches: PathBuf,
        /// Descriptor (or feature) file the first match column indexes
        points_a: PathBuf,
        /// Descriptor (or feature) file the second match column indexes
        points_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate on an image sequence with homographies
    Evaluate {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks
    Selftest,
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Domain(e),
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&io::read_text(path)?)?;
    }
    let f = &cli.detector;
    if let Some(c) = &f.channels {
        cfg.set("channels", c)?;
    }
    if let Some(v) = f.edge_ratio {
        cfg.detector.edge_ratio = v;
    }
    if let Some(v) = f.contrast {
        cfg.detector.contrast_floor = v;
    }
    if let Some(v) = f.octaves {
        cfg.detector.octaves = v;
    }
    let env = std::env::var("AFFINA_THREADS").ok();
    if let Some(n) = cli.threads {
        cfg.set("threads", &n.to_string())?;
    } else if let Some(n) = env {
        cfg.set("threads", &n).map_err(|e| Failure::Usage(format!("AFFINA_THREADS: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn points(path: &Path) -> Result<Vec<(f64, f64)>, Error> {
    io::parse_coordinates(&io::read_text(path)?)
}

fn descriptor_values(path: &Path) -> Result<Vec<[u8; 128]>, Error> {
    Ok(io::parse_descriptors(&io::read_text(path)?)?
        .into_iter()
        .map(|d| d.values)
        .collect())
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    match &cli.command {
        Command::Detect { image, out } => {
            let features = detect(&load_image(image)?, &cfg.detector)?;
            io::write_text(out, &io::format_features(&features))?;
            eprintln!("{} features", features.len());
        }
        Command::Describe { image, features, out } => {
            let img = load_image(image)?;
            let feats = io::parse_features(&io::read_text(features)?)?;
            let d = describe_features(&img, &feats, &cfg.detector, &cfg.descriptor)?;
            io::write_text(out, &io::format_descriptors(&d.descriptors))?;
            eprintln!(
                "{} descriptors from {} features, {} dropped",
                d.descriptors.len(),
                feats.len(),
                d.dropped.len()
            );
        }
        Command::Match { a, b, out } => {
            let m = match_descriptors(&descriptor_values(a)?, &descriptor_values(b)?, &cfg.matcher)?;
            io::write_text(out, &io::format_matches(&m))?;
            eprintln!("{} matches", m.len());
        }
        Command::Verify { matches, points_a, points_b, out } => {
            let m = io::parse_matches(&io::read_text(matches)?)?;
            let (pa, pb) = (points(points_a)?, points(points_b)?);
            let mut xs = Vec::with_capacity(m.len());
            let mut ys = Vec::with_capacity(m.len());
            for (row, x) in m.iter().enumerate() {
                match (pa.get(x.index_a), pb.get(x.index_b)) {
                    (Some(&p), Some(&q)) => {
                        xs.push(p);
                        ys.push(q);
                    }
                    _ => {
                        return Err(Failure::Domain(Error::Parse(format!(
                            "match {row} refers to ({}, {}) beyond the point files ({}, {})",
                            x.index_a,
                            x.index_b,
                            pa.len(),
                            pb.len()
                        ))))
                    }
                }
            }
            let v = verify(&xs, &ys, &cfg.distrat)?;
            let inliers = v.inliers.as_ref().map(|r| r.inlier_indices.clone()).unwrap_or_default();
            io::write_text(out, &io::format_indices(&inliers))?;
            println!("{}", v.summary());
        }
        Command::Evaluate { dir, out } => {
            let seq = load_sequence(dir)?;
            let rows = evaluate(&seq, &cfg.eval_config())?;
            emit_report(&rows, out)?;
        }
        Command::Selftest => {
            let mut failed = 0;
            for (c, secs) in selftest::run_all(cfg.seed) {
                println!("{} ({secs:.2} s)", c.line());
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Failure::Domain(Error::Numeric(format!("{failed} self-test check(s) failed"))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = run_config(&cli).and_then(|cfg| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.threads {
            pool = pool.num_threads(n);
        }
        let pool = pool
            .build()
            .map_err(|e| Failure::Domain(Error::Numeric(format!("thread pool: {e}"))))?;
        pool.install(|| execute(&cli, &cfg))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
