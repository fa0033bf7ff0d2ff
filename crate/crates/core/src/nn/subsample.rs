use rand::Rng;

use super::layers::{linear, mask_frames, LinearParams};
use super::params::ParamStore;
use super::{Ctx, SeqMask};
use crate::autodiff::{Var, Window};
use crate::tensor::{Result, TensorError};

const WINDOW: Window = Window {
    kernel: 3,
    stride: 2,
};

/// Shortest input (time or frequency) that survives both conv stages.
pub const MIN_SUBSAMPLE_INPUT: usize = 7;

/// Output extent after two valid 3×3 stride-2 stages:
/// `⌊(⌊(n−3)/2⌋ + 1 − 3)/2⌋ + 1`, or `None` below the minimum.
pub fn subsampled_len(n: usize) -> Option<usize> {
    WINDOW.out_len(n).and_then(|m| WINDOW.out_len(m))
}

/// Two 3×3 stride-2 conv+ReLU stages (1→d and d→d channels) followed by a
/// linear map of the flattened `d·f₂` features to width `d`. The convolutions
/// are stored as patch matrices: `[9, d]` and `[9d, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsamplingParams {
    pub conv1: LinearParams,
    pub conv2: LinearParams,
    pub out: LinearParams,
    pub feat_dim: usize,
    pub d: usize,
    pub freq_out: usize,
}

impl SubsamplingParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        feat_dim: usize,
        d: usize,
    ) -> Result<Self> {
        let freq_out = subsampled_len(feat_dim).ok_or_else(|| {
            TensorError::Invalid(format!(
                "feature dim {feat_dim} below subsampling minimum {MIN_SUBSAMPLE_INPUT}"
            ))
        })?;
        Ok(SubsamplingParams {
            conv1: LinearParams::new(store, rng, &format!("{name}.conv1"), 9, d, true),
            conv2: LinearParams::new(store, rng, &format!("{name}.conv2"), 9 * d, d, true),
            out: LinearParams::new(store, rng, &format!("{name}.out"), d * freq_out, d, true),
            feat_dim,
            d,
            freq_out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params() + self.out.num_params()
    }
}

/// `[B, T, F]` features → `[B, T', d]` with lengths mapped by
/// [`subsampled_len`].
pub fn conv2d_subsample<'t>(
    ctx: &Ctx<'t>,
    feats: Var<'t>,
    mask: &SeqMask,
    p: &SubsamplingParams,
) -> Result<(Var<'t>, SeqMask)> {
    let shape = feats.shape();
    if shape.len() != 3 || shape[2] != p.feat_dim {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_subsample",
            lhs: shape,
            rhs: vec![p.feat_dim],
        });
    }
    let (batch, t) = (shape[0], shape[1]);
    let too_short = |n: usize| {
        TensorError::Invalid(format!(
            "input of {n} frames is shorter than the subsampling minimum {MIN_SUBSAMPLE_INPUT}"
        ))
    };
    let t_out = subsampled_len(t).ok_or_else(|| too_short(t))?;
    if let Some(&short) = mask.lengths().iter().find(|&&l| l < MIN_SUBSAMPLE_INPUT) {
        return Err(too_short(short));
    }
    let out_mask = mask.map_lengths(t_out, |l| subsampled_len(l).expect("checked above"))?;

    let x = mask_frames(ctx, feats, mask)?.reshape(&[batch, t, p.feat_dim, 1])?;
    let h = linear(ctx, x.unfold2d(WINDOW)?, &p.conv1)?.relu()?;
    let h = linear(ctx, h.unfold2d(WINDOW)?, &p.conv2)?.relu()?;
    let h = h.reshape(&[batch, t_out, p.freq_out * p.d])?;
    Ok((linear(ctx, h, &p.out)?, out_mask))
}
