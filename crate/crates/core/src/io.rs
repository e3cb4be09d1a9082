//! Text interchange formats between pipeline stages.
//!
//! Floats are written with Rust's shortest round-trip formatting so a file
//! read back reproduces the in-memory values bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Matrix2;

use crate::descriptor::{region_ellipse, Descriptor, DESCRIPTOR_LEN};
use crate::detector::{Feature, Kind};
use crate::error::{Error, Result};
use crate::matcher::{DescriptorBytes, Match};

pub const FEATURES_MAGIC: &str = "affina-features";

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse<T: FromStr>(tok: Option<&str>, what: &str, line: usize) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Parse(format!("line {line}: missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} {tok:?}")))
}

/// Header line, count line, then per feature:
/// `x y sigma kind octave response a11 a12 a21 a22 n θ1 … θn`.
pub fn format_features(features: &[Feature]) -> String {
    let mut s = format!("{FEATURES_MAGIC}\n{}\n", features.len());
    for f in features {
        let _ = write!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {}",
            f.x,
            f.y,
            f.sigma,
            f.kind.as_str(),
            f.octave,
            f.response,
            f.a[(0, 0)],
            f.a[(0, 1)],
            f.a[(1, 0)],
            f.a[(1, 1)],
            f.orientations.len()
        );
        for t in &f.orientations {
            let _ = write!(s, " {t}");
        }
        s.push('\n');
    }
    s
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn count_line<'a>(it: &mut impl Iterator<Item = (usize, &'a str)>) -> Result<usize> {
    let (n, l) = it.next().ok_or_else(|| Error::Parse("missing count line".into()))?;
    parse(Some(l), "count", n)
}

fn expect_end<'a>(mut it: impl Iterator<Item = (usize, &'a str)>, declared: usize) -> Result<()> {
    match it.next() {
        Some((n, _)) => Err(Error::Parse(format!("line {n}: more records than the declared {declared}"))),
        None => Ok(()),
    }
}

pub fn parse_features(text: &str) -> Result<Vec<Feature>> {
    let mut it = lines(text);
    match it.next() {
        Some((_, FEATURES_MAGIC)) => {}
        _ => return Err(Error::Parse(format!("missing {FEATURES_MAGIC:?} header"))),
    }
    let count = count_line(&mut it)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = it
            .next()
            .ok_or_else(|| Error::Parse(format!("expected {count} features, found {}", out.len())))?;
        let mut t = l.split_whitespace();
        let x = parse(t.next(), "x", n)?;
        let y = parse(t.next(), "y", n)?;
        let sigma = parse(t.next(), "sigma", n)?;
        let kind: Kind = parse(t.next(), "kind", n)?;
        let octave = parse(t.next(), "octave", n)?;
        let response = parse(t.next(), "response", n)?;
        let mut a = [0.0; 4];
        for v in a.iter_mut() {
            *v = parse(t.next(), "transform entry", n)?;
        }
        let k: usize = parse(t.next(), "orientation count", n)?;
        let orientations = (0..k).map(|_| parse(t.next(), "orientation", n)).collect::<Result<_>>()?;
        if t.next().is_some() {
            return Err(Error::Parse(format!("line {n}: trailing fields")));
        }
        out.push(Feature {
            x,
            y,
            sigma,
            kind,
            octave,
            response,
            a: Matrix2::new(a[0], a[1], a[2], a[3]),
            orientations,
        });
    }
    expect_end(it, count)?;
    Ok(out)
}

/// `128`, count, then `x y a b c v1 … v128` per descriptor.
pub fn format_descriptors(descs: &[Descriptor]) -> String {
    let mut s = format!("{DESCRIPTOR_LEN}\n{}\n", descs.len());
    for d in descs {
        let (a, b, c) = region_ellipse(d.sigma, &d.a);
        let _ = write!(s, "{} {} {} {} {}", d.x, d.y, a, b, c);
        for v in d.values {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

/// A descriptor record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorRecord {
    pub x: f64,
    pub y: f64,
    pub ellipse: (f64, f64, f64),
    pub values: DescriptorBytes,
}

pub fn parse_descriptors(text: &str) -> Result<Vec<DescriptorRecord>> {
    let mut it = lines(text);
    let dim = count_line(&mut it)?;
    if dim != DESCRIPTOR_LEN {
        return Err(Error::Parse(format!("descriptor dimension {dim}, expected {DESCRIPTOR_LEN}")));
    }
    let count = count_line(&mut it)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = it
            .next()
            .ok_or_else(|| Error::Parse(format!("expected {count} descriptors, found {}", out.len())))?;
        let mut t = l.split_whitespace();
        let x = parse(t.next(), "x", n)?;
        let y = parse(t.next(), "y", n)?;
        let ellipse = (parse(t.next(), "a", n)?, parse(t.next(), "b", n)?, parse(t.next(), "c", n)?);
        let mut values = [0u8; DESCRIPTOR_LEN];
        for v in values.iter_mut() {
            *v = parse(t.next(), "descriptor byte", n)?;
        }
        if t.next().is_some() {
            return Err(Error::Parse(format!("line {n}: trailing fields")));
        }
        out.push(DescriptorRecord { x, y, ellipse, values });
    }
    expect_end(it, count)?;
    Ok(out)
}

/// `idx_a idx_b distance ratio` per line.
pub fn format_matches(matches: &[Match]) -> String {
    let mut s = String::new();
    for m in matches {
        let _ = writeln!(s, "{} {} {} {}", m.index_a, m.index_b, m.distance, m.ratio);
    }
    s
}

pub fn parse_matches(text: &str) -> Result<Vec<Match>> {
    lines(text)
        .map(|(n, l)| {
            let mut t = l.split_whitespace();
            let m = Match {
                index_a: parse(t.next(), "index", n)?,
                index_b: parse(t.next(), "index", n)?,
                distance: parse(t.next(), "distance", n)?,
                ratio: parse(t.next(), "ratio", n)?,
            };
            if t.next().is_some() {
                return Err(Error::Parse(format!("line {n}: trailing fields")));
            }
            Ok(m)
        })
        .collect()
}

/// Point coordinates from either a feature or a descriptor file.
pub fn parse_coordinates(text: &str) -> Result<Vec<(f64, f64)>> {
    let first = lines(text).next().map(|(_, l)| l);
    if first == Some(FEATURES_MAGIC) {
        Ok(parse_features(text)?.iter().map(|f| (f.x, f.y)).collect())
    } else {
        Ok(parse_descriptors(text)?.iter().map(|d| (d.x, d.y)).collect())
    }
}

pub fn format_indices(indices: &[usize]) -> String {
    indices.iter().map(|i| format!("{i}\n")).collect()
}
