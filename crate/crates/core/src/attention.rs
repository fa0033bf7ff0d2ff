//! Multi-head self-attention with relative positional encoding
//! (Transformer-XL style: learned content/position biases and projected
//! sinusoidal offset embeddings).

use rand::Rng;

use crate::autodiff::Var;
use crate::nn::{dropout, linear, uniform, Ctx, LinearParams, ParamId, ParamStore, SeqMask};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct RelPosMhaParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub out: LinearParams,
    /// Projection of the sinusoidal offset table; no bias.
    pub pos: LinearParams,
    /// Content bias `u`, length `d`.
    pub bias_u: ParamId,
    /// Position bias `v`, length `d`.
    pub bias_v: ParamId,
    pub heads: usize,
    pub d: usize,
    pub dropout: f64,
}

impl RelPosMhaParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: d={d} is not divisible by heads={heads}"
            )));
        }
        let dh = d / heads;
        let bound = (6.0 / (heads + dh) as f64).sqrt();
        Ok(RelPosMhaParams {
            query: LinearParams::new(store, rng, &format!("{name}.linear_q"), d, d, true),
            key: LinearParams::new(store, rng, &format!("{name}.linear_k"), d, d, true),
            value: LinearParams::new(store, rng, &format!("{name}.linear_v"), d, d, true),
            out: LinearParams::new(store, rng, &format!("{name}.linear_out"), d, d, true),
            pos: LinearParams::new(store, rng, &format!("{name}.linear_pos"), d, d, false),
            bias_u: store.add(format!("{name}.pos_bias_u"), uniform(rng, &[d], bound)),
            bias_v: store.add(format!("{name}.pos_bias_v"), uniform(rng, &[d], bound)),
            heads,
            d,
            dropout,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn num_params(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.out, &self.pos]
            .iter()
            .map(|l| l.num_params())
            .sum::<usize>()
            + 2 * self.d
    }
}

/// Sinusoidal table for offsets `T-1, T-2, …, -(T-1)` (row `r` holds offset
/// `T-1-r`). Column `2i` is `sin(off·ω_i)`, column `2i+1` is `cos(off·ω_i)`,
/// with `ω_i = 10000^(-2i/d)`.
pub fn sinusoidal_rel_embeddings(t: usize, d: usize) -> Tensor {
    let rows = (2 * t).saturating_sub(1);
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let off = (t as f64 - 1.0) - r as f64;
        for c in 0..d {
            let i = (c / 2) as f64;
            let w = 10000f64.powf(-2.0 * i / d as f64);
            data.push(if c % 2 == 0 { (off * w).sin() } else { (off * w).cos() });
        }
    }
    Tensor::new(&[rows, d], data).expect("table size")
}

/// Self-attention over `x: [B, T, d]`; keys beyond each sequence's length
/// get zero weight.
pub fn mha_forward<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &RelPosMhaParams,
    mask: &SeqMask,
) -> Result<Var<'t>> {
    mha_forward_with_weights(ctx, x, p, mask).map(|(y, _)| y)
}

/// As [`mha_forward`], also returning the post-softmax, pre-dropout
/// weights `[B, h, T, T]`.
pub fn mha_forward_with_weights<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    p: &RelPosMhaParams,
    mask: &SeqMask,
) -> Result<(Var<'t>, Var<'t>)> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != p.d {
        return Err(TensorError::ShapeMismatch {
            op: "mha",
            lhs: shape,
            rhs: vec![mask.batch(), mask.max_len(), p.d],
        });
    }
    let (b, t) = (shape[0], shape[1]);
    if b != mask.batch() || t != mask.max_len() {
        return Err(TensorError::ShapeMismatch {
            op: "mha mask",
            lhs: shape,
            rhs: vec![mask.batch(), mask.max_len()],
        });
    }
    let (h, dh) = (p.heads, p.head_dim());
    // [B, T, d] -> [B, h, T, dh]
    let heads = |v: Var<'t>| v.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3]);

    let q = linear(ctx, x, &p.query)?;
    let q_u = heads(q.add(ctx.param(p.bias_u))?)?;
    let q_v = heads(q.add(ctx.param(p.bias_v))?)?;
    let k_t = linear(ctx, x, &p.key)?
        .reshape(&[b, t, h, dh])?
        .permute(&[0, 2, 3, 1])?;
    let v = heads(linear(ctx, x, &p.value)?)?;

    let table = ctx.constant(sinusoidal_rel_embeddings(t, p.d));
    let pos_t = linear(ctx, table, &p.pos)?
        .reshape(&[2 * t - 1, h, dh])?
        .permute(&[1, 2, 0])?;

    let content = q_u.matmul(k_t)?;
    let position = q_v.matmul(pos_t)?.rel_shift()?;
    let scores = content.add(position)?.scale(1.0 / (dh as f64).sqrt())?;
    let weights = scores.masked_softmax(&mask.keys())?;

    let context = dropout(ctx, weights, p.dropout)?
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, p.d])?;
    Ok((linear(ctx, context, &p.out)?, weights))
}
