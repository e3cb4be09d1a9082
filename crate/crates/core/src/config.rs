//! Run configuration read from `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors.

use std::collections::HashSet;
use std::str::FromStr;

use nalgebra::Matrix2;

use crate::affine::tilt_transform;
use crate::descriptor::DescriptorConfig;
use crate::detector::{default_channels, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geomcheck::DistratConfig;
use crate::matcher::MatcherConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub descriptor: DescriptorConfig,
    pub matcher: MatcherConfig,
    pub distrat: DistratConfig,
    pub overlap_max: f64,
    pub seed: u64,
    /// `None` means all available cores.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            detector: DetectorConfig::default(),
            descriptor: DescriptorConfig::default(),
            matcher: MatcherConfig::default(),
            distrat: DistratConfig::default(),
            overlap_max: EvalConfig::default().overlap_max,
            seed: 0,
            threads: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "channels",
    "edge_ratio",
    "contrast",
    "contrast_rel",
    "octaves",
    "harris_window",
    "border",
    "max_refine_iter",
    "ori_half_extent",
    "ori_window",
    "ori_spacing",
    "peak_ratio",
    "half_extent",
    "side",
    "clamp",
    "ratio_max",
    "mutual",
    "bins",
    "ldr_lo",
    "ldr_hi",
    "alpha",
    "overlap_max",
    "seed",
    "threads",
];

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// `default`, `identity`, or a comma list whose items are either `t@phi`
/// (tilt, longitude in degrees) or a full matrix `a11:a12:a21:a22`.
pub fn parse_channels(v: &str) -> Result<Vec<Matrix2<f64>>> {
    match v.trim() {
        "default" => return Ok(default_channels()),
        "identity" => return Ok(vec![Matrix2::identity()]),
        _ => {}
    }
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim) {
        let m = if let Some((t, phi)) = item.split_once('@') {
            let t: f64 = value("channels", t.trim())?;
            let phi: f64 = value("channels", phi.trim())?;
            if !(t >= 1.0 && t.is_finite()) {
                return Err(Error::Config(format!("channels: tilt {t} must be at least 1")));
            }
            tilt_transform(t, phi.to_radians())
        } else {
            let e: Vec<f64> = item
                .split(':')
                .map(|x| value("channels", x.trim()))
                .collect::<Result<_>>()?;
            if e.len() != 4 {
                return Err(Error::Config(format!("channels: {item:?} is neither t@phi nor a11:a12:a21:a22")));
            }
            Matrix2::new(e[0], e[1], e[2], e[3])
        };
        out.push(m);
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let (d, s) = (&mut self.detector, &mut self.descriptor);
        match key {
            "channels" => d.channels = parse_channels(v)?,
            "edge_ratio" => d.edge_ratio = value(key, v)?,
            "contrast" => d.contrast_floor = value(key, v)?,
            "contrast_rel" => d.contrast_rel = value(key, v)?,
            "octaves" => d.octaves = value(key, v)?,
            "harris_window" => d.harris_window = value(key, v)?,
            "border" => d.border = value(key, v)?,
            "max_refine_iter" => d.max_refine_iter = value(key, v)?,
            "ori_half_extent" => s.ori_half_extent = value(key, v)?,
            "ori_window" => s.ori_window = value(key, v)?,
            "ori_spacing" => s.ori_spacing = value(key, v)?,
            "peak_ratio" => s.peak_ratio = value(key, v)?,
            "half_extent" => s.half_extent = value(key, v)?,
            "side" => s.side = value(key, v)?,
            "clamp" => s.clamp = value(key, v)?,
            "ratio_max" => self.matcher.ratio_max = value(key, v)?,
            "mutual" => self.matcher.mutual = flag(key, v)?,
            "bins" => self.distrat.bins = value(key, v)?,
            "ldr_lo" => self.distrat.lo = value(key, v)?,
            "ldr_hi" => self.distrat.hi = value(key, v)?,
            "alpha" => self.distrat.alpha = value(key, v)?,
            "overlap_max" => self.overlap_max = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "threads" => {
                let n: usize = value(key, v)?;
                if n == 0 {
                    return Err(Error::Config("threads must be at least 1".into()));
                }
                self.threads = Some(n);
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: {k:?} given twice", i + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.descriptor.validate()?;
        self.matcher.validate()?;
        self.distrat.validate()?;
        if !(self.overlap_max > 0.0 && self.overlap_max <= 1.0) {
            return Err(Error::Config(format!("overlap_max {} outside (0, 1]", self.overlap_max)));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            detector: self.detector.clone(),
            descriptor: self.descriptor.clone(),
            matcher: self.matcher,
            overlap_max: self.overlap_max,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_text("# nothing\n\n   \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_settable() {
        let text = "channels = identity\nedge_ratio = 8\ncontrast = 0.01\ncontrast_rel = 0.1\noctaves = 3\n\
                    harris_window = 1\nborder = 3\nmax_refine_iter = 4\nori_half_extent = 2\nori_window = 1\n\
                    ori_spacing = 0.5\npeak_ratio = 0.7\nhalf_extent = 5\nside = 8\nclamp = 0.3\n\
                    ratio_max = 0.6 # tighter\nmutual = yes\nbins = 30\nldr_lo = -3\nldr_hi = 3\nalpha = 0.05\n\
                    overlap_max = 0.5\nseed = 42\nthreads = 4\n";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(c.detector.channels, vec![Matrix2::identity()]);
        assert_eq!(
            (c.detector.edge_ratio, c.detector.contrast_floor, c.detector.contrast_rel),
            (8.0, 0.01, 0.1)
        );
        assert_eq!(
            (c.detector.octaves, c.detector.harris_window, c.detector.border, c.detector.max_refine_iter),
            (3, 1, 3, 4)
        );
        assert_eq!(c.descriptor.side, 8);
        assert_eq!(c.descriptor.clamp, 0.3);
        assert_eq!(c.matcher, MatcherConfig { ratio_max: 0.6, mutual: true });
        assert_eq!(c.distrat, DistratConfig { bins: 30, lo: -3.0, hi: 3.0, alpha: 0.05 });
        assert_eq!((c.overlap_max, c.seed, c.threads), (0.5, 42, Some(4)));
    }

    #[test]
    fn strictness() {
        assert!(RunConfig::from_text("edge_ration = 3").is_err());
        assert!(RunConfig::from_text("octaves = 3\noctaves = 4").is_err());
        assert!(RunConfig::from_text("octaves").is_err());
        assert!(RunConfig::from_text("octaves = three").is_err());
        assert!(RunConfig::from_text("mutual = maybe").is_err());
        assert!(RunConfig::from_text("threads = 0").is_err());
        assert!(RunConfig::from_text("side = 10").is_err());
        assert!(RunConfig::from_text("ratio_max = 1.5").is_err());
    }

    #[test]
    fn channel_forms() {
        assert_eq!(parse_channels("default").unwrap().len(), 9);
        let c = parse_channels("1@0, 2@90, 0.5:0:0:2").unwrap();
        assert_eq!(c[0], Matrix2::identity());
        // R(90°)·diag(2, 1) sends e1 to (0, 2)
        assert!((c[1] - Matrix2::new(0.0, -1.0, 2.0, 0.0)).abs().max() < 1e-12);
        assert_eq!(c[2], Matrix2::new(0.5, 0.0, 0.0, 2.0));
        let s = parse_channels(&format!("{SQRT_2}@45")).unwrap()[0];
        assert!((s.determinant() - SQRT_2).abs() < 1e-12);
        assert!(parse_channels("0.5@0").is_err());
        assert!(parse_channels("1:2:3").is_err());
        assert!(parse_channels("").is_err());
        assert!(RunConfig::from_text("channels = 0:0:0:0").is_err());
    }
}
