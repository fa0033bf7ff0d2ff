use rand::Rng;
use rand_distr::{Bernoulli, Distribution};

use super::params::{uniform, ParamId, ParamStore};
use super::{Ctx, Mode, SeqMask};
use crate::autodiff::Var;
use crate::tensor::{Result, Tensor, TensorError};

fn trailing(x: &Var<'_>) -> usize {
    x.shape().last().copied().unwrap_or(0)
}

fn width_error(op: &'static str, x: &Var<'_>, expected: usize) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: x.shape(),
        rhs: vec![expected],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    /// Weight `[d_in, d_out]` and bias drawn from U(±1/√d_in).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[d_out], bound)));
        LinearParams {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// `x·W + b` over the trailing axis.
pub fn linear<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &LinearParams) -> Result<Var<'t>> {
    if trailing(&x) != p.d_in {
        return Err(width_error("linear", &x, p.d_in));
    }
    if x.shape().len() == 1 {
        let y = linear(ctx, x.reshape(&[1, p.d_in])?, p)?;
        return y.reshape(&[p.d_out]);
    }
    let y = x.matmul(ctx.param(p.weight))?;
    match p.bias {
        Some(b) => y.add(ctx.param(b)),
        None => Ok(y),
    }
}

/// Kernel-size-1 convolution over time; the same map as [`linear`].
pub fn pointwise_conv<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &LinearParams) -> Result<Var<'t>> {
    linear(ctx, x, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
    pub d: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[d])),
            eps: LAYER_NORM_EPS,
            d,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.d
    }
}

/// Per-position normalisation over the feature axis with population
/// variance: `(x − μ)/√(σ² + eps) · gain + shift`.
pub fn layer_norm<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &LayerNormParams) -> Result<Var<'t>> {
    if trailing(&x) != p.d {
        return Err(width_error("layer_norm", &x, p.d));
    }
    let axis = x.shape().len() - 1;
    let centered = x.sub(x.mean(axis, true)?)?;
    let var = centered.square()?.mean(axis, true)?;
    let inv_std = var.offset(p.eps)?.sqrt()?.recip()?;
    centered
        .mul(inv_std)?
        .mul(ctx.param(p.gain))?
        .add(ctx.param(p.shift))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
}

impl BatchNormParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[channels])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Batch normalisation of `[B, T, C]` over valid (batch, time) positions.
///
/// Train mode normalises with the masked batch statistics and queues a
/// momentum update of the running statistics on `ctx`; eval mode uses the
/// running statistics.
pub fn batch_norm<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &BatchNormParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != p.channels {
        return Err(width_error("batch_norm", &x, p.channels));
    }
    let normalized = match ctx.mode {
        Mode::Eval => {
            let rm = ctx.param(p.running_mean).value();
            let rv = ctx.param(p.running_var).value();
            let inv = rv.map(|v| 1.0 / (v + p.eps).sqrt());
            x.sub(ctx.constant(rm))?.mul(ctx.constant(inv))?
        }
        Mode::Train => {
            let count = mask.valid_frames();
            if count == 0 {
                return Err(TensorError::Invalid("batch_norm: no valid frames".into()));
            }
            let m = ctx.constant(mask.frames());
            let inv_n = 1.0 / count as f64;
            let mean = x.mul(m)?.sum(0, false)?.sum(0, false)?.scale(inv_n)?;
            let centered = x.sub(mean)?;
            let var = centered
                .mul(m)?
                .square()?
                .sum(0, false)?
                .sum(0, false)?
                .scale(inv_n)?;
            let inv_std = var.offset(p.eps)?.sqrt()?.recip()?;

            let unbiased = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let mom = p.momentum;
            let blend = |old: &Tensor, new: &Tensor, scale: f64| {
                old.zip_map(new, |o, n| (1.0 - mom) * o + mom * n * scale)
            };
            ctx.push_buffer_update(
                p.running_mean,
                blend(&ctx.param(p.running_mean).value(), &mean.value(), 1.0)?,
            );
            ctx.push_buffer_update(
                p.running_var,
                blend(&ctx.param(p.running_var).value(), &var.value(), unbiased)?,
            );
            centered.mul(inv_std)?
        }
    };
    normalized.mul(ctx.param(p.gain))?.add(ctx.param(p.shift))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConvParams {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
    pub kernel_size: usize,
}

impl DepthwiseConvParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        kernel_size: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "depthwise kernel size {kernel_size} must be odd"
            )));
        }
        let bound = 1.0 / (kernel_size as f64).sqrt();
        let kernel = store.add(
            format!("{name}.kernel"),
            uniform(rng, &[channels, kernel_size], bound),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[channels], bound)));
        Ok(DepthwiseConvParams {
            kernel,
            bias,
            channels,
            kernel_size,
        })
    }

    pub fn num_params(&self) -> usize {
        self.channels * self.kernel_size + if self.bias.is_some() { self.channels } else { 0 }
    }
}

/// Zeroes padded frames of `[B, T, C]`.
pub fn mask_frames<'t>(ctx: &Ctx<'t>, x: Var<'t>, mask: &SeqMask) -> Result<Var<'t>> {
    x.mul(ctx.constant(mask.frames()))
}

/// Same-length per-channel convolution over time; padded frames are zeroed
/// first so they contribute exactly like the implicit zero padding.
pub fn depthwise_conv1d<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &DepthwiseConvParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    if trailing(&x) != p.channels {
        return Err(width_error("depthwise_conv1d", &x, p.channels));
    }
    let y = mask_frames(ctx, x, mask)?.depthwise_conv1d(ctx.param(p.kernel))?;
    match p.bias {
        Some(b) => y.add(ctx.param(b)),
        None => Ok(y),
    }
}

/// `x · σ(x)`
pub fn swish(x: Var<'_>) -> Result<Var<'_>> {
    x.mul(x.sigmoid()?)
}

/// Exact Gaussian form `x · Φ(x)`, Φ from erf.
pub fn gelu(x: Var<'_>) -> Result<Var<'_>> {
    let cdf = x
        .scale(std::f64::consts::FRAC_1_SQRT_2)?
        .erf()?
        .offset(1.0)?
        .scale(0.5)?;
    x.mul(cdf)
}

/// First channel half gated by the sigmoid of the second half.
pub fn glu(x: Var<'_>) -> Result<Var<'_>> {
    let axis = x.shape().len().checked_sub(1).ok_or(TensorError::AxisOutOfRange {
        op: "glu",
        axis: 0,
        rank: 0,
    })?;
    let (value, gate) = x.split2(axis)?;
    value.mul(gate.sigmoid()?)
}

/// Inverted dropout: kept entries are scaled by `1/(1 − rate)` in train
/// mode; identity in eval mode or at rate 0.
pub fn dropout<'t>(ctx: &Ctx<'t>, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = Bernoulli::new(1.0 - rate).expect("valid probability");
    let scale = 1.0 / (1.0 - rate);
    let data = ctx.with_rng(|rng| {
        (0..n)
            .map(|_| if keep.sample(rng) { scale } else { 0.0 })
            .collect()
    });
    x.mul(ctx.constant(Tensor::new(&shape, data)?))
}
