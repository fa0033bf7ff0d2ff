//! Self-contained invariant suite behind `branchkit verify` and
//! `branchkit gradcheck`.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{mha_forward, RelPosMhaParams};
use crate::autodiff::{grad_check, GradCheckReport};
use crate::ctc::{ctc_brute_force, ctc_loss, min_frames};
use crate::encoder::{
    cgmlp_forward, conv_module_forward, encoder_forward, layer_forward, merge_branches,
    CgMlpParams, ConvModuleParams, Encoder, EncoderConfig, LayerKind, LayerParams, MergeMode,
    MergeParams,
};
use crate::model::ModelConfig;
use crate::nn::{
    batch_norm, conv2d_subsample, depthwise_conv1d, dropout, gelu, glu, grad_check_params,
    layer_norm, linear, pointwise_conv, swish, uniform, BatchNormParams, Ctx, DepthwiseConvParams,
    LayerNormParams, LinearParams, Mode, ParamStore, SeqMask, SubsamplingParams,
};
use crate::profiler::{count_macs, count_params, enumerate_params, mac_oracle, profile_report};
use crate::tensor::{Result as TResult, Tensor};
use crate::{Tape, Var};

use super::HarnessError;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<CheckOutcome, HarnessError>) -> Self {
        r.unwrap_or_else(|e| CheckOutcome::new(name, false, format!("error: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Primitives,
    Mha,
    ConvModule,
    CgMlp,
    Merge,
    Conformer,
    EBranchformer,
    Ctc,
}

impl GradTarget {
    pub const ALL: [GradTarget; 8] = [
        GradTarget::Primitives,
        GradTarget::Mha,
        GradTarget::ConvModule,
        GradTarget::CgMlp,
        GradTarget::Merge,
        GradTarget::Conformer,
        GradTarget::EBranchformer,
        GradTarget::Ctc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradTarget::Primitives => "primitives",
            GradTarget::Mha => "mha",
            GradTarget::ConvModule => "conv",
            GradTarget::CgMlp => "cgmlp",
            GradTarget::Merge => "merge",
            GradTarget::Conformer => "conformer",
            GradTarget::EBranchformer => "ebranchformer",
            GradTarget::Ctc => "ctc",
        }
    }
}

impl FromStr for GradTarget {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = GradTarget::ALL.iter().map(|t| t.as_str()).collect();
                HarnessError::Config(format!("unknown gradcheck target {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(r, shape, 1.0)
}

/// Moves every store tensor off its initial value so that unit gains and
/// zero biases do not hide gradient paths.
fn perturb(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get(id);
        let noise = random(r, t.shape());
        let value = if name.ends_with("running_var") {
            noise.map(|v| 0.5 + v.abs())
        } else {
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + 0.5 * b).collect();
            Tensor::new(t.shape(), data).expect("same shape")
        };
        store.set(id, value);
    }
}

/// `Σ y ⊙ probe` over valid frames. The probe is kept small so difference
/// roundoff stays under the relative-error floor.
fn probe_loss<'t>(ctx: &Ctx<'t>, y: Var<'t>, probe: &Tensor, mask: &SeqMask) -> TResult<Var<'t>> {
    y.mul(ctx.constant(probe.map(|v| v * 1e-4)))?
        .mul(ctx.constant(mask.frames()))?
        .sum_all()
}

fn dense_probe<'t>(y: Var<'t>, probe: &Tensor) -> TResult<Var<'t>> {
    let tape = y.tape();
    y.mul(tape.constant(probe.map(|v| v * 1e-3)))?.sum_all()
}

type TapeFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> TResult<Var<'t>>>;

/// Tape operations and layer primitives, each checked on its own.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, f64)>, HarnessError> {
    let mut r = rng(seed);
    let a = random(&mut r, &[2, 3, 4]);
    let b = random(&mut r, &[2, 3, 4]);
    let row = random(&mut r, &[4]);
    let m = random(&mut r, &[2, 4, 3]);
    let pos = a.map(|v| 0.5 + v.abs());
    let scores = random(&mut r, &[1, 2, 3, 5]);
    let probe = random(&mut r, &[2, 3, 4]);
    let probe_mm = random(&mut r, &[2, 3, 3]);
    let probe_half = random(&mut r, &[2, 3, 2]);
    let probe_red = random(&mut r, &[2, 4]);
    let probe_shift = random(&mut r, &[1, 2, 3, 3]);
    let keys = Tensor::new(&[2, 1, 1, 4], vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?;

    let p = probe.clone();
    let mut tape_cases: Vec<(&'static str, Vec<Tensor>, TapeFn)> = vec![
        ("add", vec![a.clone(), row.clone()], Box::new(move |_, v| dense_probe(v[0].add(v[1])?, &p))),
    ];
    let p = probe.clone();
    tape_cases.push(("sub", vec![a.clone(), b.clone()], Box::new(move |_, v| dense_probe(v[0].sub(v[1])?, &p))));
    let p = probe.clone();
    tape_cases.push(("mul", vec![a.clone(), row.clone()], Box::new(move |_, v| dense_probe(v[0].mul(v[1])?, &p))));
    let p = probe_mm.clone();
    tape_cases.push(("matmul", vec![a.clone(), m.clone()], Box::new(move |_, v| dense_probe(v[0].matmul(v[1])?, &p))));
    let unary: [(&'static str, for<'a> fn(&Var<'a>) -> TResult<Var<'a>>, bool); 9] = [
        ("exp", |x| x.exp(), false),
        ("log", |x| x.ln(), true),
        ("sigmoid", |x| x.sigmoid(), false),
        ("tanh", |x| x.tanh(), false),
        ("erf", |x| x.erf(), false),
        ("relu", |x| x.relu(), false),
        ("neg", |x| x.neg(), false),
        ("scale", |x| x.scale(-2.5), false),
        ("sqrt", |x| x.sqrt(), true),
    ];
    for (name, op, positive) in unary {
        let p = probe.clone();
        let input = if positive { pos.clone() } else { a.clone() };
        tape_cases.push((name, vec![input], Box::new(move |_, v| dense_probe(op(&v[0])?, &p))));
    }
    for (name, kind) in [("sum", 0u8), ("mean", 1), ("max", 2)] {
        let p = probe_red.clone();
        tape_cases.push((
            name,
            vec![a.clone()],
            Box::new(move |_, v| {
                let y = match kind {
                    0 => v[0].sum(1, false)?,
                    1 => v[0].mean(1, false)?,
                    _ => v[0].max(1, false)?,
                };
                dense_probe(y, &p)
            }),
        ));
    }
    let p = random(&mut r, &[2, 3, 8]);
    tape_cases.push((
        "concat",
        vec![a.clone(), b.clone()],
        Box::new(move |t, v| dense_probe(t.concat(&[v[0], v[1]], 2)?, &p)),
    ));
    let (p1, p2) = (probe_half.clone(), random(&mut r, &[2, 3, 2]));
    tape_cases.push((
        "split",
        vec![a.clone()],
        Box::new(move |_, v| {
            let (x, y) = v[0].split2(2)?;
            dense_probe(x, &p1)?.add(dense_probe(y, &p2)?)
        }),
    ));
    let p = probe.clone();
    tape_cases.push(("softmax", vec![a.clone()], Box::new(move |_, v| dense_probe(v[0].softmax()?, &p))));
    let p = probe.clone();
    tape_cases.push(("log_softmax", vec![a.clone()], Box::new(move |_, v| dense_probe(v[0].log_softmax()?, &p))));
    let (p, k) = (random(&mut r, &[2, 2, 3, 4]), keys.clone());
    tape_cases.push((
        "masked_softmax",
        vec![random(&mut r, &[2, 2, 3, 4])],
        Box::new(move |_, v| dense_probe(v[0].masked_softmax(&k)?, &p)),
    ));
    tape_cases.push((
        "rel_shift",
        vec![scores],
        Box::new(move |_, v| dense_probe(v[0].rel_shift()?, &probe_shift)),
    ));

    let mut out = Vec::new();
    for (name, inputs, f) in tape_cases {
        let report = grad_check(|t, v| f(t, v), &inputs, GRAD_EPS).map_err(|e| HarnessError::Config(e.to_string()))?;
        out.push((name, report.max_rel_error));
    }

    // layer primitives over a padded batch
    let mask = SeqMask::new(vec![5, 3], 5)?;
    let x = random(&mut r, &[2, 5, 6]);
    let probe6 = random(&mut r, &[2, 5, 6]);
    let probe3 = random(&mut r, &[2, 5, 3]);
    let mut store = ParamStore::new();
    let lin = LinearParams::new(&mut store, &mut r, "lin", 6, 6, true);
    let ln = LayerNormParams::new(&mut store, "ln", 6);
    let bn = BatchNormParams::new(&mut store, "bn", 6);
    let dw = DepthwiseConvParams::new(&mut store, &mut r, "dw", 6, 3, true)?;
    perturb(&mut store, &mut r);
    let checks: [(&'static str, Mode, u8); 11] = [
        ("linear", Mode::Eval, 0),
        ("pointwise_conv", Mode::Eval, 1),
        ("swish", Mode::Eval, 2),
        ("gelu", Mode::Eval, 3),
        ("glu", Mode::Eval, 4),
        ("layer_norm", Mode::Eval, 5),
        ("batch_norm_eval", Mode::Eval, 6),
        ("batch_norm_train", Mode::Train, 6),
        ("depthwise_conv1d", Mode::Eval, 7),
        ("dropout", Mode::Train, 8),
        ("mask_frames", Mode::Eval, 9),
    ];
    for (name, mode, which) in checks {
        let report = grad_check_params(&store, &[x.clone()], mode, GRAD_EPS, |ctx, v| {
            let y = match which {
                0 => linear(ctx, v[0], &lin)?,
                1 => pointwise_conv(ctx, v[0], &lin)?,
                2 => swish(v[0])?,
                3 => gelu(v[0])?,
                4 => return probe_loss(ctx, glu(v[0])?, &probe3, &mask),
                5 => layer_norm(ctx, v[0], &ln)?,
                6 => batch_norm(ctx, v[0], &bn, &mask)?,
                7 => depthwise_conv1d(ctx, v[0], &dw, &mask)?,
                8 => dropout(ctx, v[0], 0.3)?,
                _ => crate::nn::mask_frames(ctx, v[0], &mask)?,
            };
            probe_loss(ctx, y, &probe6, &mask)
        })
        .map_err(|e| HarnessError::Config(e.to_string()))?;
        out.push((name, report.max_rel_error));
    }

    let mut store = ParamStore::new();
    let sub = SubsamplingParams::new(&mut store, &mut r, "sub", 8, 4)?;
    perturb(&mut store, &mut r);
    let feats = random(&mut r, &[2, 11, 8]);
    let in_mask = SeqMask::new(vec![11, 9], 11)?;
    let probe_sub = random(&mut r, &[2, 2, 4]);
    let report = grad_check_params(&store, &[feats], Mode::Eval, GRAD_EPS, |ctx, v| {
        let (y, m) = conv2d_subsample(ctx, v[0], &in_mask, &sub)?;
        probe_loss(ctx, y, &probe_sub, &m)
    })
    .map_err(|e| HarnessError::Config(e.to_string()))?;
    out.push(("conv2d_subsample", report.max_rel_error));
    Ok(out)
}

fn toy_layer_config(kind: LayerKind, d: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        conv_kernel: 3,
        mlp_kernel: 3,
        merge_kernel: 3,
        dropout: 0.0,
        attention_dropout: 0.0,
        ..EncoderConfig::toy(kind, 1, d, heads, 8)
    }
}

fn report_error(r: std::result::Result<GradCheckReport, crate::autodiff::GradCheckError>) -> Result<f64, HarnessError> {
    r.map(|r| r.max_rel_error).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Worst relative error of one target at one seed.
pub fn gradcheck_target(target: GradTarget, seed: u64) -> Result<f64, HarnessError> {
    let mut r = rng(seed ^ 0x6772_6164);
    let mut store = ParamStore::new();
    match target {
        GradTarget::Primitives => Ok(primitive_gradchecks(seed)?
            .into_iter()
            .map(|(_, e)| e)
            .fold(0.0, f64::max)),
        GradTarget::Mha => {
            let p = RelPosMhaParams::new(&mut store, &mut r, "mha", 8, 2, 0.0)?;
            perturb(&mut store, &mut r);
            let mask = SeqMask::new(vec![5, 4], 5)?;
            let (x, probe) = (random(&mut r, &[2, 5, 8]), random(&mut r, &[2, 5, 8]));
            report_error(grad_check_params(&store, &[x], Mode::Eval, GRAD_EPS, |ctx, v| {
                probe_loss(ctx, mha_forward(ctx, v[0], &p, &mask)?, &probe, &mask)
            }))
        }
        GradTarget::ConvModule => {
            let p = ConvModuleParams::new(&mut store, &mut r, "conv", 6, 3)?;
            perturb(&mut store, &mut r);
            let mask = SeqMask::new(vec![5, 3], 5)?;
            let (x, probe) = (random(&mut r, &[2, 5, 6]), random(&mut r, &[2, 5, 6]));
            let mut worst: f64 = 0.0;
            for mode in [Mode::Eval, Mode::Train] {
                worst = worst.max(report_error(grad_check_params(&store, &[x.clone()], mode, GRAD_EPS, |ctx, v| {
                    probe_loss(ctx, conv_module_forward(ctx, v[0], &p, &mask)?, &probe, &mask)
                }))?);
            }
            Ok(worst)
        }
        GradTarget::CgMlp => {
            let p = CgMlpParams::new(&mut store, &mut r, "cgmlp", 6, 8, 3, 0.0)?;
            perturb(&mut store, &mut r);
            let mask = SeqMask::new(vec![4, 3], 4)?;
            let (x, probe) = (random(&mut r, &[2, 4, 6]), random(&mut r, &[2, 4, 6]));
            report_error(grad_check_params(&store, &[x], Mode::Eval, GRAD_EPS, |ctx, v| {
                probe_loss(ctx, cgmlp_forward(ctx, v[0], &p, &mask)?, &probe, &mask)
            }))
        }
        GradTarget::Merge => {
            let p = MergeParams::new(&mut store, &mut r, "merge", 4, 3, MergeMode::Additive)?;
            perturb(&mut store, &mut r);
            let mask = SeqMask::new(vec![3, 2], 3)?;
            let (a, m) = (random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 3, 4]));
            let probe = random(&mut r, &[2, 3, 4]);
            report_error(grad_check_params(&store, &[a, m], Mode::Eval, GRAD_EPS, |ctx, v| {
                probe_loss(ctx, merge_branches(ctx, v[0], v[1], &p, &mask)?, &probe, &mask)
            }))
        }
        GradTarget::Conformer | GradTarget::EBranchformer => {
            let kind = if target == GradTarget::Conformer {
                LayerKind::Conformer
            } else {
                LayerKind::EBranchformer
            };
            let enc = Encoder::new(&mut store, &mut r, "enc", &toy_layer_config(kind, 8, 2))?;
            perturb(&mut store, &mut r);
            let mask = SeqMask::new(vec![4, 3], 4)?;
            let (x, probe) = (random(&mut r, &[2, 4, 8]), random(&mut r, &[2, 4, 8]));
            let layer = &enc.layers[0];
            report_error(grad_check_params(&store, &[x], Mode::Eval, GRAD_EPS, |ctx, v| {
                probe_loss(ctx, layer_forward(ctx, v[0], layer, &mask)?, &probe, &mask)
            }))
        }
        GradTarget::Ctc => {
            let (logits, labels) = ctc_instance(&mut r);
            let t = logits.shape()[1];
            report_error(grad_check(
                |_, v| ctc_loss(v[0].log_softmax()?, &[labels.clone()], &[t]),
                &[logits],
                GRAD_EPS,
            ))
        }
    }
}

/// Random `[1, T, C]` logits with T ≤ 8, C ≤ 5 and an admissible label
/// sequence (possibly empty).
fn ctc_instance(r: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let t = r.random_range(1..=8);
    let v = r.random_range(1..=4);
    let logits: Vec<f64> = (0..t * (v + 1)).map(|_| r.random_range(-3.0..3.0)).collect();
    let logits = Tensor::new(&[1, t, v + 1], logits).expect("sized");
    loop {
        let l = r.random_range(0..=t);
        let labels: Vec<usize> = (0..l).map(|_| r.random_range(1..=v)).collect();
        if min_frames(&labels) <= t {
            return (logits, labels);
        }
    }
}

/// One outcome per target, each over `seeds` seeds.
pub fn gradient_suite(targets: &[GradTarget], seeds: u64) -> Vec<CheckOutcome> {
    targets
        .iter()
        .map(|&target| {
            let name = format!("gradcheck/{}", target.as_str());
            CheckOutcome::from_result(&name, (|| {
                let mut worst: f64 = 0.0;
                let mut worst_seed = 0;
                for seed in 0..seeds {
                    let e = gradcheck_target(target, seed)?;
                    if !(e <= worst) {
                        worst = e;
                        worst_seed = seed;
                    }
                }
                Ok(CheckOutcome::new(
                    &name,
                    worst < GRAD_TOLERANCE,
                    format!("max rel err {worst:.3e} over {seeds} seeds (worst seed {worst_seed})"),
                ))
            })())
        })
        .collect()
}

/// Recursion against path enumeration on random small instances.
pub fn ctc_equivalence(instances: usize, seed: u64) -> CheckOutcome {
    CheckOutcome::from_result("ctc/brute_force", (|| {
        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (logits, labels) = ctc_instance(&mut r);
            let tape = Tape::new();
            let lp = tape.constant(logits).log_softmax()?;
            let t = lp.shape()[1];
            let fast = ctc_loss(lp, &[labels.clone()], &[t])?.value().item();
            let lp2 = lp.value();
            let c = lp2.shape()[2];
            let slow = ctc_brute_force(&Tensor::new(&[t, c], lp2.to_vec())?, &labels)?;
            worst = worst.max((fast - slow).abs());
        }
        Ok(CheckOutcome::new(
            "ctc/brute_force",
            worst <= 1e-9,
            format!("max |diff| {worst:.3e} over {instances} instances"),
        ))
    })())
}

fn reference_layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + crate::nn::LAYER_NORM_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn eval_ctx<'t>(tape: &'t Tape, store: &ParamStore) -> Ctx<'t> {
    Ctx::frozen(tape, store, Mode::Eval, 0)
}

fn zero_layer_identity(kind: LayerKind) -> Result<CheckOutcome, HarnessError> {
    let name = format!("identity/zero_{}_layer_is_layer_norm", kind.as_str());
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let enc = Encoder::new(&mut store, &mut r, "enc", &toy_layer_config(kind, 8, 2))?;
    store.zero_params("enc.encoders");
    let gain = match &enc.layers[0] {
        LayerParams::Conformer(p) => p.norm_final.gain,
        LayerParams::EBranchformer(p) => p.norm_final.gain,
    };
    store.set(gain, Tensor::ones(&[8]));
    let (len, x) = (vec![4, 2], random(&mut r, &[2, 4, 8]));
    let mask = SeqMask::new(len.clone(), 4)?;
    let tape = Tape::new();
    let ctx = eval_ctx(&tape, &store);
    let y = layer_forward(&ctx, ctx.constant(x.clone()), &enc.layers[0], &mask)?.value();
    let mut worst: f64 = 0.0;
    for (b, &n) in len.iter().enumerate() {
        for t in 0..n {
            let off = (b * 4 + t) * 8;
            let expect = reference_layer_norm(&x.data()[off..off + 8]);
            for (c, e) in expect.iter().enumerate() {
                worst = worst.max((y.data()[off + c] - e).abs());
            }
        }
    }
    Ok(CheckOutcome::new(name, worst <= 1e-10, format!("max |diff| {worst:.3e}")))
}

fn zero_fusion_merge() -> Result<CheckOutcome, HarnessError> {
    let mut store = ParamStore::new();
    let mut r = rng(12);
    let p = MergeParams::new(&mut store, &mut r, "merge", 4, 3, MergeMode::Additive)?;
    perturb(&mut store, &mut r);
    store.zero_params("merge.depthwise_conv_fusion");
    let (a, m) = (random(&mut r, &[1, 5, 4]), random(&mut r, &[1, 5, 4]));
    let tape = Tape::new();
    let ctx = eval_ctx(&tape, &store);
    let y = merge_branches(&ctx, ctx.constant(a.clone()), ctx.constant(m.clone()), &p, &SeqMask::full(1, 5))?.value();
    let w = store.get(p.proj.weight);
    let bias = store.get(p.proj.bias.expect("merge projection has a bias"));
    let mut worst: f64 = 0.0;
    for t in 0..5 {
        for o in 0..4 {
            let mut acc = bias.data()[o];
            for c in 0..4 {
                acc += a.at(&[0, t, c]) * w.at(&[c, o]) + m.at(&[0, t, c]) * w.at(&[4 + c, o]);
            }
            worst = worst.max((y.at(&[0, t, o]) - acc).abs());
        }
    }
    Ok(CheckOutcome::new(
        "identity/zero_fusion_merge_is_concat_linear",
        worst <= 1e-12,
        format!("max |diff| {worst:.3e}"),
    ))
}

fn delta_kernel() -> Result<CheckOutcome, HarnessError> {
    let mut worst_bits = 0usize;
    let mut checked = 0usize;
    for k in [1, 3, 7, 15] {
        let mut store = ParamStore::new();
        let mut r = rng(13 + k as u64);
        let p = DepthwiseConvParams::new(&mut store, &mut r, "dw", 5, k, false)?;
        let mut kernel = vec![0.0; 5 * k];
        for c in 0..5 {
            kernel[c * k + k / 2] = 1.0;
        }
        store.set(p.kernel, Tensor::new(&[5, k], kernel)?);
        let lengths = vec![9, 6];
        let mask = SeqMask::new(lengths.clone(), 9)?;
        let x = random(&mut r, &[2, 9, 5]);
        let tape = Tape::new();
        let ctx = eval_ctx(&tape, &store);
        let y = depthwise_conv1d(&ctx, ctx.constant(x.clone()), &p, &mask)?.value();
        for (b, &n) in lengths.iter().enumerate() {
            for t in 0..9 {
                for c in 0..5 {
                    let expect = if t < n { x.at(&[b, t, c]) } else { 0.0 };
                    checked += 1;
                    if y.at(&[b, t, c]).to_bits() != expect.to_bits() {
                        worst_bits += 1;
                    }
                }
            }
        }
    }
    Ok(CheckOutcome::new(
        "identity/delta_depthwise_kernel",
        worst_bits == 0,
        format!("{worst_bits} of {checked} outputs differ from the input"),
    ))
}

fn padding_opacity(kind: LayerKind) -> Result<CheckOutcome, HarnessError> {
    let mut store = ParamStore::new();
    let mut r = rng(14);
    let cfg = EncoderConfig {
        layers: 2,
        ..toy_layer_config(kind, 8, 2)
    };
    let enc = Encoder::new(&mut store, &mut r, "enc", &cfg)?;
    perturb(&mut store, &mut r);
    let lengths = vec![27, 20, 15];
    let mask = SeqMask::new(lengths.clone(), 27)?;
    let clean = random(&mut r, &[3, 27, 8]);
    let mut dirty = clean.to_vec();
    for (b, &len) in lengths.iter().enumerate() {
        for t in len..27 {
            for f in 0..8 {
                dirty[(b * 27 + t) * 8 + f] = 50.0 * ((t * 8 + f) as f64).sin();
            }
        }
    }
    let dirty = Tensor::new(&[3, 27, 8], dirty)?;
    let run = |x: &Tensor| -> Result<(Tensor, SeqMask), HarnessError> {
        let tape = Tape::new();
        let ctx = eval_ctx(&tape, &store);
        let (y, m) = encoder_forward(&ctx, ctx.constant(x.clone()), &mask, &enc)?;
        Ok((y.value(), m))
    };
    let ((ya, m), (yb, _)) = (run(&clean)?, run(&dirty)?);
    let (tp, d) = (ya.shape()[1], ya.shape()[2]);
    let mut worst: f64 = 0.0;
    for (b, &n) in m.lengths().iter().enumerate() {
        for i in (b * tp) * d..(b * tp + n) * d {
            worst = worst.max((ya.data()[i] - yb.data()[i]).abs());
        }
    }
    Ok(CheckOutcome::new(
        format!("identity/{}_stack_padding_opacity", kind.as_str()),
        worst <= 1e-8,
        format!("max |diff| on valid frames {worst:.3e}"),
    ))
}

pub fn structural_identities() -> Vec<CheckOutcome> {
    vec![
        CheckOutcome::from_result("identity/zero_conformer_layer_is_layer_norm", zero_layer_identity(LayerKind::Conformer)),
        CheckOutcome::from_result(
            "identity/zero_e_branchformer_layer_is_layer_norm",
            zero_layer_identity(LayerKind::EBranchformer),
        ),
        CheckOutcome::from_result("identity/zero_fusion_merge_is_concat_linear", zero_fusion_merge()),
        CheckOutcome::from_result("identity/delta_depthwise_kernel", delta_kernel()),
        CheckOutcome::from_result("identity/conformer_stack_padding_opacity", padding_opacity(LayerKind::Conformer)),
        CheckOutcome::from_result(
            "identity/e_branchformer_stack_padding_opacity",
            padding_opacity(LayerKind::EBranchformer),
        ),
    ]
}

fn preset(name: &str, vocab: usize) -> Result<ModelConfig, HarnessError> {
    Ok(ModelConfig {
        encoder: EncoderConfig::preset(name)
            .ok_or_else(|| HarnessError::Config(format!("unknown preset {name:?}")))?,
        vocab,
    })
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

/// MAC and parameter totals at the published operating points.
pub fn accounting_targets() -> Vec<CheckOutcome> {
    let macs = |name: &str, target: f64| {
        let label = format!("profile/{name}_macs");
        CheckOutcome::from_result(&label.clone(), (|| {
            let started = Instant::now();
            let rep = profile_report(&preset(name, 500)?, 10.0, 100.0)?;
            let secs = started.elapsed().as_secs_f64();
            let m = rep.totals.macs as f64;
            Ok(CheckOutcome::new(
                &label,
                within(m, target, 0.10) && secs < 1.0,
                format!("{:.3}e9 MACs for 10 s (target {:.1}e9 ± 10%) in {secs:.3} s", m / 1e9, target / 1e9),
            ))
        })())
    };
    let params = |name: &str, target: f64| {
        let label = format!("profile/{name}_params");
        CheckOutcome::from_result(&label.clone(), (|| {
            let p = count_params(&preset(name, 500)?)? as f64;
            Ok(CheckOutcome::new(
                &label,
                within(p, target, 0.03),
                format!("{:.3}M parameters (target {:.1}M ± 3%)", p / 1e6, target / 1e6),
            ))
        })())
    };
    let ordering = CheckOutcome::from_result("profile/encoder_param_ordering", (|| {
        let encoder_only = |name: &str| -> Result<u64, HarnessError> {
            let rows = crate::profiler::module_rows(&preset(name, 500)?, crate::nn::MIN_SUBSAMPLE_INPUT)?;
            Ok(rows.iter().filter(|r| r.name != "ctc_head").map(|r| r.params).sum())
        };
        let e = encoder_only("medium-ebranchformer")?;
        let d = encoder_only("medium-conformer-deep")?;
        let w = encoder_only("medium-conformer-wide")?;
        Ok(CheckOutcome::new(
            "profile/encoder_param_ordering",
            e < d && d < w,
            format!("e-branchformer {e} < conformer-deep {d} < conformer-wide {w}"),
        ))
    })());
    vec![
        macs("medium-conformer-deep", 10.3e9),
        macs("medium-ebranchformer", 9.9e9),
        params("medium-conformer-deep", 25.8e6),
        params("medium-ebranchformer", 25.3e6),
        ordering,
    ]
}

/// Closed forms against instantiation and the counting forward pass.
pub fn accounting_oracles() -> Vec<CheckOutcome> {
    let params = CheckOutcome::from_result("profile/param_oracle", (|| {
        let mut detail = Vec::new();
        let mut ok = true;
        for name in EncoderConfig::PRESETS {
            let cfg = preset(name, 500)?;
            let (a, b) = (count_params(&cfg)?, enumerate_params(&cfg)?);
            ok &= a == b;
            detail.push(format!("{name} {a}/{b}"));
        }
        Ok(CheckOutcome::new("profile/param_oracle", ok, detail.join(", ")))
    })());
    let macs = CheckOutcome::from_result("profile/mac_oracle", (|| {
        let mut ok = true;
        let mut cases = 0;
        for kind in [LayerKind::Conformer, LayerKind::EBranchformer] {
            for (layers, d, heads) in [(1, 8, 2), (2, 16, 4)] {
                for frames in [7, 20, 41] {
                    let cfg = ModelConfig {
                        encoder: EncoderConfig {
                            merge_kernel: 5,
                            ..EncoderConfig::toy(kind, layers, d, heads, 12)
                        },
                        vocab: 6,
                    };
                    ok &= count_macs(&cfg, frames)? == mac_oracle(&cfg, frames)?;
                    cases += 1;
                }
            }
        }
        Ok(CheckOutcome::new("profile/mac_oracle", ok, format!("{cases} toy configurations")))
    })());
    vec![params, macs]
}

/// Everything above with the gradient suite at `seeds` seeds.
pub fn verify_all(seeds: u64) -> Vec<CheckOutcome> {
    let mut out = accounting_targets();
    out.extend(accounting_oracles());
    out.extend(gradient_suite(&GradTarget::ALL, seeds));
    out.push(ctc_equivalence(200, 5));
    out.extend(structural_identities());
    out
}
