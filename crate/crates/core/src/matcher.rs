//! Exhaustive nearest-neighbour matching with a distinctiveness ratio test.

use rayon::prelude::*;

use crate::descriptor::DESCRIPTOR_LEN;
use crate::error::{Error, Result};

pub type DescriptorBytes = [u8; DESCRIPTOR_LEN];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    /// L2 distance between the dequantized (byte / 512) vectors.
    pub distance: f64,
    /// Nearest over second-nearest distance.
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    pub ratio_max: f64,
    /// Keep only pairs that are each other's nearest neighbour and pass the
    /// ratio test in both directions.
    pub mutual: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            ratio_max: 0.8,
            mutual: false,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio_max) {
            return Err(Error::Config(format!("ratio_max {} outside [0, 1]", self.ratio_max)));
        }
        Ok(())
    }
}

/// Squared byte distance; exact in integers.
fn dist2(a: &DescriptorBytes, b: &DescriptorBytes) -> u32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i32 - y as i32;
            (d * d) as u32
        })
        .sum()
}

fn to_distance(d2: u32) -> f64 {
    (d2 as f64).sqrt() / 512.0
}

/// Nearest and second-nearest index with squared distances; ties go to the lower index.
fn two_nearest(q: &DescriptorBytes, set: &[DescriptorBytes]) -> (usize, u32, u32) {
    let (mut best, mut d1, mut d2) = (0, u32::MAX, u32::MAX);
    for (j, c) in set.iter().enumerate() {
        let d = dist2(q, c);
        if d < d1 {
            d2 = d1;
            d1 = d;
            best = j;
        } else if d < d2 {
            d2 = d;
        }
    }
    (best, d1, d2)
}

fn ratio(d1: u32, d2: u32) -> f64 {
    if d2 == 0 {
        1.0
    } else {
        to_distance(d1) / to_distance(d2)
    }
}

fn one_way(a: &[DescriptorBytes], b: &[DescriptorBytes]) -> Vec<(usize, u32, f64)> {
    a.par_iter()
        .map(|q| {
            let (j, d1, d2) = two_nearest(q, b);
            (j, d1, ratio(d1, d2))
        })
        .collect()
}

pub fn match_descriptors(a: &[DescriptorBytes], b: &[DescriptorBytes], cfg: &MatcherConfig) -> Result<Vec<Match>> {
    cfg.validate()?;
    if b.len() < 2 {
        return Err(Error::InsufficientCandidates(format!(
            "{} reference descriptors, need at least 2",
            b.len()
        )));
    }
    let forward = one_way(a, b);
    let backward = if cfg.mutual {
        if a.len() < 2 {
            return Err(Error::InsufficientCandidates(format!(
                "{} query descriptors, need at least 2 for mutual matching",
                a.len()
            )));
        }
        Some(one_way(b, a))
    } else {
        None
    };
    let mut out = Vec::new();
    for (i, &(j, d1, r)) in forward.iter().enumerate() {
        if r > cfg.ratio_max {
            continue;
        }
        if let Some(back) = &backward {
            let (k, _, rb) = back[j];
            if k != i || rb > cfg.ratio_max {
                continue;
            }
        }
        out.push(Match {
            index_a: i,
            index_b: j,
            distance: to_distance(d1),
            ratio: r,
        });
    }
    Ok(out)
}
