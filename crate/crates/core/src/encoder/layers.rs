use rand::Rng;

use crate::attention::{mha_forward, RelPosMhaParams};
use crate::autodiff::Var;
use crate::nn::{
    conv2d_subsample, dropout, layer_norm, Ctx, LayerNormParams, ParamStore, SeqMask,
    SubsamplingParams,
};
use crate::tensor::Result;

use super::blocks::{
    cgmlp_forward, conv_module_forward, ffn_forward, merge_branches, CgMlpParams,
    ConvModuleParams, FfnParams, MergeParams,
};
use super::config::{EncoderConfig, LayerKind};

#[derive(Debug, Clone)]
pub struct ConformerLayerParams {
    pub norm_ffn1: LayerNormParams,
    pub ffn1: FfnParams,
    pub norm_mha: LayerNormParams,
    pub mha: RelPosMhaParams,
    pub norm_conv: LayerNormParams,
    pub conv: ConvModuleParams,
    pub norm_ffn2: LayerNormParams,
    pub ffn2: FfnParams,
    pub norm_final: LayerNormParams,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct EBranchformerLayerParams {
    pub norm_ffn1: LayerNormParams,
    pub ffn1: FfnParams,
    pub norm_mha: LayerNormParams,
    pub mha: RelPosMhaParams,
    pub cgmlp: CgMlpParams,
    pub merge: MergeParams,
    pub norm_ffn2: LayerNormParams,
    pub ffn2: FfnParams,
    pub norm_final: LayerNormParams,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Conformer(ConformerLayerParams),
    EBranchformer(EBranchformerLayerParams),
}

impl ConformerLayerParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d;
        let n = |s: &str| format!("{name}.{s}");
        Ok(ConformerLayerParams {
            norm_ffn1: LayerNormParams::new(store, &n("norm_ff_macaron"), d),
            ffn1: FfnParams::new(store, rng, &n("feed_forward_macaron"), d, cfg.d_ff(), cfg.dropout),
            norm_mha: LayerNormParams::new(store, &n("norm_mha"), d),
            mha: RelPosMhaParams::new(store, rng, &n("self_attn"), d, cfg.heads, cfg.attention_dropout)?,
            norm_conv: LayerNormParams::new(store, &n("norm_conv"), d),
            conv: ConvModuleParams::new(store, rng, &n("conv_module"), d, cfg.conv_kernel)?,
            norm_ffn2: LayerNormParams::new(store, &n("norm_ff"), d),
            ffn2: FfnParams::new(store, rng, &n("feed_forward"), d, cfg.d_ff(), cfg.dropout),
            norm_final: LayerNormParams::new(store, &n("norm_final"), d),
            dropout: cfg.dropout,
        })
    }
}

impl EBranchformerLayerParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d;
        let n = |s: &str| format!("{name}.{s}");
        Ok(EBranchformerLayerParams {
            norm_ffn1: LayerNormParams::new(store, &n("norm_ff_macaron"), d),
            ffn1: FfnParams::new(store, rng, &n("feed_forward_macaron"), d, cfg.d_ff(), cfg.dropout),
            norm_mha: LayerNormParams::new(store, &n("norm_mha"), d),
            mha: RelPosMhaParams::new(store, rng, &n("attn"), d, cfg.heads, cfg.attention_dropout)?,
            cgmlp: CgMlpParams::new(store, rng, &n("cgmlp"), d, cfg.d_mlp(), cfg.mlp_kernel, cfg.dropout)?,
            merge: MergeParams::new(store, rng, &n("merge"), d, cfg.merge_kernel, cfg.merge_mode)?,
            norm_ffn2: LayerNormParams::new(store, &n("norm_ff"), d),
            ffn2: FfnParams::new(store, rng, &n("feed_forward"), d, cfg.d_ff(), cfg.dropout),
            norm_final: LayerNormParams::new(store, &n("norm_final"), d),
            dropout: cfg.dropout,
        })
    }
}

/// `x + ½·dropout(FFN(LN(x)))`
fn half_ffn<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    norm: &LayerNormParams,
    ffn: &FfnParams,
    rate: f64,
) -> Result<Var<'t>> {
    let h = ffn_forward(ctx, layer_norm(ctx, x, norm)?, ffn)?;
    x.add(dropout(ctx, h, rate)?.scale(0.5)?)
}

pub fn conformer_layer<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &ConformerLayerParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    Ok(conformer_layer_states(ctx, x, p, mask)?[4])
}

/// Residual stream after each sub-block, then the output: `[x₁, x₂, x₃, x₄, y]`.
pub fn conformer_layer_states<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &ConformerLayerParams,
    mask: &SeqMask,
) -> Result<[Var<'t>; 5]> {
    let x1 = half_ffn(ctx, x, &p.norm_ffn1, &p.ffn1, p.dropout)?;
    let att = mha_forward(ctx, layer_norm(ctx, x1, &p.norm_mha)?, &p.mha, mask)?;
    let x2 = x1.add(dropout(ctx, att, p.dropout)?)?;
    let conv = conv_module_forward(ctx, layer_norm(ctx, x2, &p.norm_conv)?, &p.conv, mask)?;
    let x3 = x2.add(dropout(ctx, conv, p.dropout)?)?;
    let x4 = half_ffn(ctx, x3, &p.norm_ffn2, &p.ffn2, p.dropout)?;
    Ok([x1, x2, x3, x4, layer_norm(ctx, x4, &p.norm_final)?])
}

pub fn ebranchformer_layer<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &EBranchformerLayerParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    Ok(ebranchformer_layer_states(ctx, x, p, mask)?[3])
}

/// `[x₁, x₂, x₃, y]`
pub fn ebranchformer_layer_states<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &EBranchformerLayerParams,
    mask: &SeqMask,
) -> Result<[Var<'t>; 4]> {
    let x1 = half_ffn(ctx, x, &p.norm_ffn1, &p.ffn1, p.dropout)?;
    let att = mha_forward(ctx, layer_norm(ctx, x1, &p.norm_mha)?, &p.mha, mask)?;
    let mlp = cgmlp_forward(ctx, x1, &p.cgmlp, mask)?;
    let merged = merge_branches(ctx, att, mlp, &p.merge, mask)?;
    let x2 = x1.add(dropout(ctx, merged, p.dropout)?)?;
    let x3 = half_ffn(ctx, x2, &p.norm_ffn2, &p.ffn2, p.dropout)?;
    Ok([x1, x2, x3, layer_norm(ctx, x3, &p.norm_final)?])
}

pub fn layer_forward<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &LayerParams, mask: &SeqMask) -> Result<Var<'t>> {
    match p {
        LayerParams::Conformer(p) => conformer_layer(ctx, x, p, mask),
        LayerParams::EBranchformer(p) => ebranchformer_layer(ctx, x, p, mask),
    }
}

/// In train mode the whole layer is skipped with probability `p_drop`.
pub fn stochastic_depth<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p_drop: f64,
    layer: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    if ctx.is_train() && p_drop > 0.0 && ctx.with_rng(|r| r.random::<f64>()) < p_drop {
        return Ok(x);
    }
    layer(x)
}

/// Subsampling frontend plus a stack of identical layers.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub frontend: SubsamplingParams,
    pub layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let frontend = SubsamplingParams::new(store, rng, &format!("{name}.embed"), cfg.feat_dim, cfg.d)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let lname = format!("{name}.encoders.{i}");
            layers.push(match cfg.kind {
                LayerKind::Conformer => {
                    LayerParams::Conformer(ConformerLayerParams::new(store, rng, &lname, cfg)?)
                }
                LayerKind::EBranchformer => {
                    LayerParams::EBranchformer(EBranchformerLayerParams::new(store, rng, &lname, cfg)?)
                }
            });
        }
        Ok(Encoder {
            config: cfg.clone(),
            frontend,
            layers,
        })
    }
}

/// `feats: [B, T, F]` → `([B, T', d], subsampled mask)`.
pub fn encoder_forward<'t>(
    ctx: &Ctx<'t>,
    feats: Var<'t>,
    mask: &SeqMask,
    enc: &Encoder,
) -> Result<(Var<'t>, SeqMask)> {
    let (mut x, sub_mask) = conv2d_subsample(ctx, feats, mask, &enc.frontend)?;
    for layer in &enc.layers {
        x = stochastic_depth(ctx, x, enc.config.stochastic_depth, |x| {
            layer_forward(ctx, x, layer, &sub_mask)
        })?;
    }
    Ok((x, sub_mask))
}
