//! Sub-blocks shared by the encoder layers.

use rand::Rng;

use crate::autodiff::Var;
use crate::nn::{
    batch_norm, depthwise_conv1d, dropout, gelu, glu, layer_norm, linear, mask_frames,
    pointwise_conv, swish, BatchNormParams, Ctx, DepthwiseConvParams, LayerNormParams,
    LinearParams, ParamStore, SeqMask,
};
use crate::tensor::{Result, TensorError};

use super::config::MergeMode;

fn check_width(op: &'static str, x: &Var<'_>, d: usize) -> Result<()> {
    let s = x.shape();
    if s.last() != Some(&d) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: s,
            rhs: vec![d],
        });
    }
    Ok(())
}

/// Position-wise feed-forward block: linear, swish, dropout, linear.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w_in: LinearParams,
    pub w_out: LinearParams,
    pub dropout: f64,
}

impl FfnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Self {
        FfnParams {
            w_in: LinearParams::new(store, rng, &format!("{name}.w_1"), d, d_ff, true),
            w_out: LinearParams::new(store, rng, &format!("{name}.w_2"), d_ff, d, true),
            dropout,
        }
    }

    pub fn num_params(&self) -> usize {
        self.w_in.num_params() + self.w_out.num_params()
    }
}

pub fn ffn_forward<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &FfnParams) -> Result<Var<'t>> {
    check_width("ffn", &x, p.w_in.d_in)?;
    let h = swish(linear(ctx, x, &p.w_in)?)?;
    linear(ctx, dropout(ctx, h, p.dropout)?, &p.w_out)
}

/// Conformer convolution module.
#[derive(Debug, Clone)]
pub struct ConvModuleParams {
    pub pointwise_in: LinearParams,
    pub depthwise: DepthwiseConvParams,
    pub norm: BatchNormParams,
    pub pointwise_out: LinearParams,
}

impl ConvModuleParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(ConvModuleParams {
            pointwise_in: LinearParams::new(store, rng, &format!("{name}.pointwise_conv1"), d, 2 * d, true),
            depthwise: DepthwiseConvParams::new(store, rng, &format!("{name}.depthwise_conv"), d, kernel, true)?,
            norm: BatchNormParams::new(store, &format!("{name}.norm"), d),
            pointwise_out: LinearParams::new(store, rng, &format!("{name}.pointwise_conv2"), d, d, true),
        })
    }

    pub fn num_params(&self) -> usize {
        self.pointwise_in.num_params()
            + self.depthwise.num_params()
            + self.norm.num_params()
            + self.pointwise_out.num_params()
    }
}

/// pointwise (d→2d), GLU, depthwise, batch-norm, swish, pointwise (d→d).
/// Padded frames are zeroed ahead of each convolution.
pub fn conv_module_forward<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &ConvModuleParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    check_width("conv module", &x, p.pointwise_in.d_in)?;
    let h = pointwise_conv(ctx, mask_frames(ctx, x, mask)?, &p.pointwise_in)?;
    let h = depthwise_conv1d(ctx, glu(h)?, &p.depthwise, mask)?;
    let h = swish(batch_norm(ctx, h, &p.norm, mask)?)?;
    pointwise_conv(ctx, mask_frames(ctx, h, mask)?, &p.pointwise_out)
}

/// Convolutional gating MLP branch.
#[derive(Debug, Clone)]
pub struct CgMlpParams {
    pub norm: LayerNormParams,
    pub proj_in: LinearParams,
    pub gate_norm: LayerNormParams,
    /// Over `d_mlp/2` channels; its bias is the gate bias.
    pub gate_conv: DepthwiseConvParams,
    pub proj_out: LinearParams,
    pub dropout: f64,
}

impl CgMlpParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        d_mlp: usize,
        kernel: usize,
        dropout: f64,
    ) -> Result<Self> {
        if d_mlp == 0 || d_mlp % 2 != 0 {
            return Err(TensorError::OddSplit { axis: 2, extent: d_mlp });
        }
        let half = d_mlp / 2;
        Ok(CgMlpParams {
            norm: LayerNormParams::new(store, &format!("{name}.norm"), d),
            proj_in: LinearParams::new(store, rng, &format!("{name}.channel_proj1"), d, d_mlp, true),
            gate_norm: LayerNormParams::new(store, &format!("{name}.csgu.norm"), half),
            gate_conv: DepthwiseConvParams::new(store, rng, &format!("{name}.csgu.conv"), half, kernel, true)?,
            proj_out: LinearParams::new(store, rng, &format!("{name}.channel_proj2"), half, d, true),
            dropout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params()
            + self.proj_in.num_params()
            + self.gate_norm.num_params()
            + self.gate_conv.num_params()
            + self.proj_out.num_params()
    }
}

/// `Z = GeLU(LN(x)·U)`, `(A, B) = split(Z)`, `out = dropout((A ⊙ dwconv(LN(B)))·V)`.
pub fn cgmlp_forward<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &CgMlpParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    check_width("cgmlp", &x, p.proj_in.d_in)?;
    let z = gelu(linear(ctx, layer_norm(ctx, x, &p.norm)?, &p.proj_in)?)?;
    let axis = z.shape().len() - 1;
    let (a, b) = z.split2(axis)?;
    let gate = depthwise_conv1d(ctx, layer_norm(ctx, b, &p.gate_norm)?, &p.gate_conv, mask)?;
    let y = linear(ctx, a.mul(gate)?, &p.proj_out)?;
    dropout(ctx, y, p.dropout)
}

/// Combines the attention and cgMLP branches.
#[derive(Debug, Clone)]
pub struct MergeParams {
    /// Over the `2d` concatenated channels.
    pub fusion: DepthwiseConvParams,
    pub proj: LinearParams,
    pub mode: MergeMode,
}

impl MergeParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        kernel: usize,
        mode: MergeMode,
    ) -> Result<Self> {
        Ok(MergeParams {
            fusion: DepthwiseConvParams::new(store, rng, &format!("{name}.depthwise_conv_fusion"), 2 * d, kernel, true)?,
            proj: LinearParams::new(store, rng, &format!("{name}.merge_proj"), 2 * d, d, true),
            mode,
        })
    }

    pub fn num_params(&self) -> usize {
        self.fusion.num_params() + self.proj.num_params()
    }
}

pub fn merge_branches<'t>(
    ctx: &Ctx<'t>,
    x_att: Var<'t>,
    x_mlp: Var<'t>,
    p: &MergeParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    let d = p.proj.d_out;
    check_width("merge", &x_att, d)?;
    check_width("merge", &x_mlp, d)?;
    let axis = x_att.shape().len() - 1;
    let c = ctx.tape.concat(&[x_att, x_mlp], axis)?;
    let refined = depthwise_conv1d(ctx, c, &p.fusion, mask)?;
    let fused = match p.mode {
        MergeMode::Additive => c.add(refined)?,
        MergeMode::Replace => refined,
    };
    linear(ctx, fused, &p.proj)
}
