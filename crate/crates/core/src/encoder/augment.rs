use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl SpecAugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.time_masks == 0 && self.freq_masks == 0
    }
}

/// Zeroes random time spans (inside each sequence's valid length) and
/// frequency bands of `feats: [B, T, F]`. Each width is uniform on
/// `0..=max`, clipped to the axis extent; the start is uniform over the
/// positions where the span fits.
pub fn spec_augment(
    feats: &Tensor,
    lengths: &[usize],
    cfg: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let s = feats.shape();
    if s.len() != 3 || s[0] != lengths.len() || lengths.iter().any(|&l| l > s[1]) {
        return Err(TensorError::Invalid(format!(
            "spec_augment: features {s:?} inconsistent with lengths {lengths:?}"
        )));
    }
    if cfg.is_identity() {
        return Ok(feats.clone());
    }
    let (t, f) = (s[1], s[2]);
    let mut out = feats.to_vec();
    for (b, &len) in lengths.iter().enumerate() {
        let item = &mut out[b * t * f..(b + 1) * t * f];
        for _ in 0..cfg.time_masks {
            for ti in span(len, cfg.max_time_width, rng) {
                item[ti * f..(ti + 1) * f].fill(0.0);
            }
        }
        for _ in 0..cfg.freq_masks {
            let band = span(f, cfg.max_freq_width, rng);
            for row in item.chunks_mut(f) {
                row[band.clone()].fill(0.0);
            }
        }
    }
    Tensor::new(s, out)
}

fn span(extent: usize, max: usize, rng: &mut impl Rng) -> std::ops::Range<usize> {
    let w = rng.random_range(0..=max).min(extent);
    let start = rng.random_range(0..=extent - w);
    start..start + w
}
