//! Closed-form parameter and multiply-accumulate counts, per module and in
//! total, with two oracles: enumeration of an instantiated model's tensors
//! and a counting forward pass on the tape.
//!
//! Counting convention: one MAC per multiply inside a matrix product or
//! convolution. Normalisations, activations, softmax, masking and the CTC
//! head are not counted (encoder scope). The relative-position score uses
//! the `2T'−1` offsets actually projected and scored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_forward, LayerKind};
use crate::model::{Model, ModelConfig};
use crate::nn::{subsampled_len, Ctx, Mode, SeqMask, MIN_SUBSAMPLE_INPUT};
use crate::tensor::{Result, Tensor, TensorError};
use crate::Tape;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub seconds: f64,
    pub frame_rate: f64,
    pub feat_dim: usize,
    pub input_frames: usize,
    pub encoder_frames: usize,
    pub vocab: usize,
    pub subsampling: String,
    pub mac_convention: String,
    pub param_scope: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub assumptions: Assumptions,
    pub modules: Vec<ModuleRow>,
    pub totals: Totals,
}

fn too_short(frames: usize) -> TensorError {
    TensorError::Invalid(format!(
        "{frames} input frames is below the subsampling minimum {MIN_SUBSAMPLE_INPUT}"
    ))
}

fn stage(n: usize) -> usize {
    (n - 3) / 2 + 1
}

/// Per-module rows, summed over layers. `frames` is the input length.
pub fn module_rows(cfg: &ModelConfig, frames: usize) -> Result<Vec<ModuleRow>> {
    let e = &cfg.encoder;
    e.validate()?;
    let t = subsampled_len(frames).ok_or_else(|| too_short(frames))? as u64;
    let (t1, f1) = (stage(frames) as u64, stage(e.feat_dim) as u64);
    let f2 = stage(stage(e.feat_dim)) as u64;
    let d = e.d as u64;
    let n = e.layers as u64;
    let (dff, dm) = (e.d_ff() as u64, e.d_mlp() as u64);
    let (kc, km, kg) = (e.conv_kernel as u64, e.mlp_kernel as u64, e.merge_kernel as u64);
    let vocab = cfg.vocab as u64;
    let row = |name: &str, params: u64, macs: u64| ModuleRow {
        name: name.to_string(),
        params,
        macs,
    };

    let mut rows = vec![row(
        "subsampling",
        (9 * d + d) + (9 * d * d + d) + (f2 * d * d + d),
        t1 * f1 * 9 * d + t * f2 * 9 * d * d + t * f2 * d * d,
    )];
    rows.push(row(
        "feed_forward",
        n * 2 * (2 * d * dff + dff + d),
        n * 2 * (2 * t * d * dff),
    ));
    rows.push(row(
        "self_attention",
        n * (4 * (d * d + d) + d * d + 2 * d),
        n * (4 * t * d * d + (2 * t - 1) * d * d + 2 * t * t * d + t * (2 * t - 1) * d),
    ));
    let norms_per_layer = match e.kind {
        LayerKind::Conformer => {
            rows.push(row(
                "conv_module",
                n * ((2 * d * d + 2 * d) + (d * kc + d) + 2 * d + (d * d + d)),
                n * t * (2 * d * d + d * kc + d * d),
            ));
            5
        }
        LayerKind::EBranchformer => {
            let half = dm / 2;
            rows.push(row(
                "cgmlp",
                n * (2 * d + (d * dm + dm) + 2 * half + (half * km + half) + (half * d + d)),
                n * t * (d * dm + half * km + half * d),
            ));
            rows.push(row(
                "merge",
                n * ((2 * d * kg + 2 * d) + (2 * d * d + d)),
                n * t * (2 * d * kg + 2 * d * d),
            ));
            4
        }
    };
    rows.push(row("layer_norm", n * norms_per_layer * 2 * d, 0));
    rows.push(row("ctc_head", d * (vocab + 1) + vocab + 1, 0));
    Ok(rows)
}

pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(module_rows(cfg, MIN_SUBSAMPLE_INPUT)?.iter().map(|r| r.params).sum())
}

pub fn count_macs(cfg: &ModelConfig, frames: usize) -> Result<u64> {
    Ok(module_rows(cfg, frames)?.iter().map(|r| r.macs).sum())
}

/// Trainable scalars of a freshly instantiated model.
pub fn enumerate_params(cfg: &ModelConfig) -> Result<u64> {
    let (_, store) = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(store.num_params() as u64)
}

/// Multiplies performed by an eval-mode encoder forward pass over one
/// utterance of `frames` zero frames, counted by the tape.
pub fn mac_oracle(cfg: &ModelConfig, frames: usize) -> Result<u64> {
    if frames < MIN_SUBSAMPLE_INPUT {
        return Err(too_short(frames));
    }
    let (model, store) = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &store, Mode::Eval, 0);
    let feats = ctx.constant(Tensor::zeros(&[1, frames, cfg.encoder.feat_dim]));
    encoder_forward(&ctx, feats, &SeqMask::full(1, frames), &model.encoder)?;
    Ok(tape.macs())
}

pub fn profile_report(cfg: &ModelConfig, seconds: f64, frame_rate: f64) -> Result<ProfileReport> {
    if !(seconds > 0.0 && frame_rate > 0.0) {
        return Err(TensorError::Invalid("seconds and frame rate must be positive".into()));
    }
    let frames = (seconds * frame_rate).round() as usize;
    let modules = module_rows(cfg, frames)?;
    let totals = Totals {
        params: modules.iter().map(|r| r.params).sum(),
        macs: modules.iter().map(|r| r.macs).sum(),
    };
    Ok(ProfileReport {
        assumptions: Assumptions {
            seconds,
            frame_rate,
            feat_dim: cfg.encoder.feat_dim,
            input_frames: frames,
            encoder_frames: subsampled_len(frames).expect("checked by module_rows"),
            vocab: cfg.vocab,
            subsampling: "two valid 3x3 stride-2 conv2d + ReLU stages, then linear d*F'->d".into(),
            mac_convention: "multiplies in matmuls and convolutions only, batch 1; norms, \
                             activations, softmax excluded; CTC head excluded; relative \
                             positions counted over 2T'-1 offsets"
                .into(),
            param_scope: "frontend + encoder layers + CTC head; batch-norm running \
                          statistics excluded"
                .into(),
        },
        modules,
        totals,
    })
}

impl ProfileReport {
    pub fn to_text(&self) -> String {
        let a = &self.assumptions;
        let mut s = format!(
            "# {:.1} s at {} frames/s, F={}: T={} -> T'={}, vocab {}\n",
            a.seconds, a.frame_rate, a.feat_dim, a.input_frames, a.encoder_frames, a.vocab
        );
        s += &format!("# subsampling: {}\n# macs: {}\n# params: {}\n", a.subsampling, a.mac_convention, a.param_scope);
        s += &format!("{:<16} {:>14} {:>18}\n", "module", "params", "macs");
        for r in &self.modules {
            s += &format!("{:<16} {:>14} {:>18}\n", r.name, r.params, r.macs);
        }
        s += &format!("{:<16} {:>14} {:>18}\n", "total", self.totals.params, self.totals.macs);
        s += &format!(
            "{:<16} {:>13.2}M {:>17.2}G\n",
            "",
            self.totals.params as f64 / 1e6,
            self.totals.macs as f64 / 1e9
        );
        s
    }
}

/// One line per module whose counts differ between two reports, including
/// modules present in only one of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiff {
    pub name: String,
    pub left: Option<(u64, u64)>,
    pub right: Option<(u64, u64)>,
}

pub fn diff_reports(left: &ProfileReport, right: &ProfileReport) -> Vec<RowDiff> {
    let find = |r: &ProfileReport, name: &str| {
        r.modules
            .iter()
            .find(|m| m.name == name)
            .map(|m| (m.params, m.macs))
    };
    let mut names: Vec<&str> = left.modules.iter().map(|m| m.name.as_str()).collect();
    for m in &right.modules {
        if !names.contains(&m.name.as_str()) {
            names.push(&m.name);
        }
    }
    names
        .into_iter()
        .filter_map(|name| {
            let (l, r) = (find(left, name), find(right, name));
            (l != r).then(|| RowDiff {
                name: name.to_string(),
                left: l,
                right: r,
            })
        })
        .collect()
}
