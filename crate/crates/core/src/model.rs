//! Encoder plus CTC head: the complete trainable model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::ctc::{ctc_head_forward, CtcHead};
use crate::encoder::{encoder_forward, Encoder, EncoderConfig};
use crate::nn::{Ctx, ParamStore, SeqMask};
use crate::tensor::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: CtcHead,
}

impl Model {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &ModelConfig) -> Result<Self> {
        let encoder = Encoder::new(store, rng, "encoder", &config.encoder)?;
        let head = CtcHead::new(store, rng, "ctc", config.encoder.d, config.vocab);
        Ok(Model {
            config: config.clone(),
            encoder,
            head,
        })
    }

    /// Builds a model with fresh parameters in a new store.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, rng, config)?;
        Ok((model, store))
    }
}

/// `feats: [B, T, F]` → (`[B, T', V+1]` log-probabilities, subsampled mask).
pub fn model_forward<'t>(
    ctx: &Ctx<'t>,
    feats: Var<'t>,
    mask: &SeqMask,
    model: &Model,
) -> Result<(Var<'t>, SeqMask)> {
    let (h, sub) = encoder_forward(ctx, feats, mask, &model.encoder)?;
    Ok((ctc_head_forward(ctx, h, &model.head)?, sub))
}
