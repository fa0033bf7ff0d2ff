//! Neural building blocks: linear maps, normalisations, activations,
//! depthwise/pointwise convolutions, dropout and the convolutional
//! subsampling frontend.

mod layers;
mod params;
mod subsample;

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckError, GradCheckReport, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub use layers::{
    batch_norm, depthwise_conv1d, dropout, gelu, glu, layer_norm, linear, mask_frames,
    pointwise_conv, swish, BatchNormParams, DepthwiseConvParams, LayerNormParams, LinearParams,
    LAYER_NORM_EPS,
};
pub use params::{uniform, ParamError, ParamId, ParamStore, BLOB_FILE, MANIFEST_FILE};
pub use subsample::{conv2d_subsample, subsampled_len, SubsamplingParams, MIN_SUBSAMPLE_INPUT};

/// Train/eval switch for dropout, batch-norm and stochastic depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the tape, the store's tensors bound on it, the mode,
/// the dropout RNG stream and any batch-norm running-stat updates produced
/// in train mode. The store itself is never mutated during a forward pass.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub mode: Mode,
    vars: Vec<Var<'t>>,
    rng: RefCell<ChaCha8Rng>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Ctx<'t> {
    /// Binds `store` with gradients enabled for trainable tensors.
    pub fn new(tape: &'t Tape, store: &ParamStore, mode: Mode, seed: u64) -> Self {
        Self::build(tape, store, mode, seed, true)
    }

    /// Binds `store` as constants; nothing will receive a gradient.
    pub fn frozen(tape: &'t Tape, store: &ParamStore, mode: Mode, seed: u64) -> Self {
        Self::build(tape, store, mode, seed, false)
    }

    fn build(tape: &'t Tape, store: &ParamStore, mode: Mode, seed: u64, grad: bool) -> Self {
        Ctx {
            tape,
            mode,
            vars: store.bind(tape, grad),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Uses already-recorded vars (one per store entry, in store order) as
    /// the parameters, e.g. leaves created by a gradient check.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>, mode: Mode, seed: u64) -> Self {
        Ctx {
            tape,
            mode,
            vars,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.vars[id.index()]
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    pub(crate) fn push_buffer_update(&self, id: ParamId, value: Tensor) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Drains running-stat updates; apply them to the store after the step.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Every bound store tensor, in store order.
    pub fn param_vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// [`grad_check`] of a model function over its inputs and every trainable
/// tensor of `store`. Buffers stay fixed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    mode: Mode,
    eps: f64,
    f: F,
) -> std::result::Result<GradCheckReport, GradCheckError>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let trainable: Vec<ParamId> = store.trainable_ids().collect();
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(trainable.iter().map(|&id| store.get(id).clone()));
    grad_check(
        |tape, vars| {
            let (xs, ps) = vars.split_at(inputs.len());
            let mut bound = store.bind(tape, false);
            for (&id, &v) in trainable.iter().zip(ps) {
                bound[id.index()] = v;
            }
            let ctx = Ctx::from_vars(tape, bound, mode, 0);
            f(&ctx, xs)
        },
        &all,
        eps,
    )
}

/// Valid-frame lengths for a padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqMask {
    lengths: Vec<usize>,
    max_len: usize,
}

impl SeqMask {
    pub fn new(lengths: Vec<usize>, max_len: usize) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&l| l > max_len) {
            return Err(TensorError::Invalid(format!(
                "sequence length {bad} exceeds padded length {max_len}"
            )));
        }
        Ok(SeqMask { lengths, max_len })
    }

    /// Every sequence spans the whole padded length.
    pub fn full(batch: usize, len: usize) -> Self {
        SeqMask {
            lengths: vec![len; batch],
            max_len: len,
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// `[B, T, 1]` with 1 at valid frames and 0 at padding.
    pub fn frames(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.batch() * self.max_len);
        for &l in &self.lengths {
            data.extend((0..self.max_len).map(|t| if t < l { 1.0 } else { 0.0 }));
        }
        Tensor::new(&[self.batch(), self.max_len, 1], data).expect("mask shape")
    }

    /// `[B, 1, 1, T]` key-validity mask for attention scores.
    pub fn keys(&self) -> Tensor {
        self.frames()
            .reshape(&[self.batch(), 1, 1, self.max_len])
            .expect("mask shape")
    }

    /// Applies `f` to every length, e.g. a subsampling recurrence.
    pub fn map_lengths(&self, max_len: usize, f: impl Fn(usize) -> usize) -> Result<Self> {
        SeqMask::new(self.lengths.iter().map(|&l| f(l)).collect(), max_len)
    }
}
