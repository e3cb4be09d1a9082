//! Detection followed by description, one channel at a time, so that only a
//! single scale space is alive at once.

use nalgebra::Matrix2;

use crate::descriptor::{describe, Descriptor, DescriptorConfig, DropReason};
use crate::detector::{detect_in_space, gate_channel, merge_order, octave_count, DetectorConfig, Feature};
use crate::error::Result;
use crate::image::GrayImage;
use crate::scalespace::ScaleSpace;

/// Gated features of one channel and their descriptors (indices local to the channel).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelExtraction {
    pub features: Vec<Feature>,
    pub descriptors: Vec<Descriptor>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub features: Vec<Feature>,
    /// Sorted by feature index, then orientation.
    pub descriptors: Vec<Descriptor>,
}

pub fn extract_channel(
    img: &GrayImage,
    a: &Matrix2<f64>,
    det: &DetectorConfig,
    desc: &DescriptorConfig,
) -> Result<ChannelExtraction> {
    let space = ScaleSpace::build(img, a, octave_count(img, a, det)?)?;
    let mut features = gate_channel(detect_in_space(&space, det), det);
    let out = describe(&features, &space, desc)?;
    for (f, o) in features.iter_mut().zip(out.orientations) {
        f.orientations = o;
    }
    Ok(ChannelExtraction {
        features,
        descriptors: out.descriptors,
    })
}

/// Deduplicates features across channels and carries their descriptors along.
pub fn merge_channels(parts: &[ChannelExtraction]) -> Extraction {
    let mut all = Vec::new();
    let mut offsets = Vec::with_capacity(parts.len());
    for p in parts {
        offsets.push(all.len());
        all.extend(p.features.iter().cloned());
    }
    let order = merge_order(&all);
    let mut new_index = vec![usize::MAX; all.len()];
    for (k, &i) in order.iter().enumerate() {
        new_index[i] = k;
    }
    let mut descriptors = Vec::new();
    for (p, off) in parts.iter().zip(offsets) {
        for d in &p.descriptors {
            let k = new_index[off + d.feature];
            if k != usize::MAX {
                descriptors.push(Descriptor { feature: k, ..d.clone() });
            }
        }
    }
    sort_descriptors(&mut descriptors);
    let features = order.into_iter().map(|i| all[i].clone()).collect();
    Extraction { features, descriptors }
}

pub fn extract(img: &GrayImage, det: &DetectorConfig, desc: &DescriptorConfig) -> Result<Extraction> {
    det.validate()?;
    desc.validate()?;
    let parts = det
        .channels
        .iter()
        .map(|a| extract_channel(img, a, det, desc))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_channels(&parts))
}

fn sort_descriptors(d: &mut [Descriptor]) {
    d.sort_by(|a, b| a.feature.cmp(&b.feature).then(a.theta.total_cmp(&b.theta)));
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Described {
    /// Sorted by feature index, then orientation.
    pub descriptors: Vec<Descriptor>,
    pub dropped: Vec<(usize, DropReason)>,
}

/// Describes an existing feature list, building one scale space per distinct
/// channel in order of first appearance.
pub fn describe_features(
    img: &GrayImage,
    features: &[Feature],
    det: &DetectorConfig,
    desc: &DescriptorConfig,
) -> Result<Described> {
    desc.validate()?;
    let mut channels: Vec<Matrix2<f64>> = Vec::new();
    for f in features {
        if !channels.contains(&f.a) {
            channels.push(f.a);
        }
    }
    let mut out = Described::default();
    for a in &channels {
        let index: Vec<usize> = (0..features.len()).filter(|&i| features[i].a == *a).collect();
        let subset: Vec<Feature> = index.iter().map(|&i| features[i].clone()).collect();
        let space = ScaleSpace::build(img, a, octave_count(img, a, det)?)?;
        let r = describe(&subset, &space, desc)?;
        out.descriptors
            .extend(r.descriptors.into_iter().map(|d| Descriptor { feature: index[d.feature], ..d }));
        out.dropped.extend(r.dropped.into_iter().map(|(i, why)| (index[i], why)));
    }
    sort_descriptors(&mut out.descriptors);
    out.dropped.sort_by_key(|&(i, _)| i);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::detect;
    use crate::synth::textured_scene;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            channels: vec![Matrix2::identity(), crate::affine::tilt_transform(2.0, 0.5)],
            octaves: 2,
            ..Default::default()
        }
    }

    #[test]
    fn features_agree_with_detect() {
        let img = textured_scene(96, 80, 4);
        let cfg = small_cfg();
        let e = extract(&img, &cfg, &DescriptorConfig::default()).unwrap();
        let mut plain = detect(&img, &cfg).unwrap();
        let mut got = e.features.clone();
        for f in got.iter_mut().chain(plain.iter_mut()) {
            f.orientations.clear();
        }
        assert_eq!(got, plain);
        assert!(!e.descriptors.is_empty());
    }

    #[test]
    fn descriptors_point_at_their_features() {
        let img = textured_scene(96, 80, 5);
        let e = extract(&img, &small_cfg(), &DescriptorConfig::default()).unwrap();
        for w in e.descriptors.windows(2) {
            assert!(w[0].feature <= w[1].feature);
        }
        for d in &e.descriptors {
            let f = &e.features[d.feature];
            assert_eq!((d.x, d.y, d.sigma, d.a), (f.x, f.y, f.sigma, f.a));
            assert!(f.orientations.contains(&d.theta));
        }
    }

    #[test]
    fn describing_saved_features_reproduces_extraction() {
        let img = textured_scene(96, 80, 6);
        let cfg = small_cfg();
        let desc = DescriptorConfig::default();
        let e = extract(&img, &cfg, &desc).unwrap();
        let mut bare = e.features.clone();
        for f in bare.iter_mut() {
            f.orientations.clear();
        }
        let d = describe_features(&img, &bare, &cfg, &desc).unwrap();
        assert_eq!(d.descriptors, e.descriptors);
        let described: std::collections::BTreeSet<usize> = d.descriptors.iter().map(|x| x.feature).collect();
        assert_eq!(described.len() + d.dropped.len(), bare.len());
    }
}
