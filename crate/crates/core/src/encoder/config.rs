use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conformer,
    #[serde(rename = "e_branchformer", alias = "ebranchformer")]
    EBranchformer,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conformer => "conformer",
            LayerKind::EBranchformer => "e_branchformer",
        }
    }
}

/// How the E-Branchformer merge uses its depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// `proj(c + dwconv(c))`
    #[default]
    Additive,
    /// `proj(dwconv(c))`
    Replace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: LayerKind,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// cgMLP hidden width as a multiple of `d`; unused by Conformer.
    pub mlp_expansion: usize,
    pub conv_kernel: usize,
    pub mlp_kernel: usize,
    pub merge_kernel: usize,
    #[serde(default)]
    pub merge_mode: MergeMode,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Per-layer skip probability in train mode.
    pub stochastic_depth: f64,
    pub feat_dim: usize,
}

impl EncoderConfig {
    pub fn d_ff(&self) -> usize {
        self.d * self.ffn_expansion
    }

    pub fn d_mlp(&self) -> usize {
        self.d * self.mlp_expansion
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Invalid(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        for (name, k) in [
            ("conv_kernel", self.conv_kernel),
            ("mlp_kernel", self.mlp_kernel),
            ("merge_kernel", self.merge_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name}={k} must be odd"));
            }
        }
        if self.kind == LayerKind::EBranchformer && (self.d_mlp() == 0 || self.d_mlp() % 2 != 0) {
            return bad(format!("cgMLP width {} must be even and positive", self.d_mlp()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("stochastic_depth", self.stochastic_depth),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name}={p} must lie in [0, 1)"));
            }
        }
        if self.feat_dim < crate::nn::MIN_SUBSAMPLE_INPUT {
            return bad(format!("feat_dim={} is below the subsampling minimum", self.feat_dim));
        }
        Ok(())
    }

    /// Named configurations: `medium-conformer-deep`, `medium-conformer-wide`,
    /// `medium-ebranchformer`, `large-ebranchformer`.
    pub fn preset(name: &str) -> Option<Self> {
        let medium = EncoderConfig {
            kind: LayerKind::Conformer,
            layers: 15,
            d: 256,
            heads: 4,
            ffn_expansion: 4,
            mlp_expansion: 4,
            conv_kernel: 31,
            mlp_kernel: 31,
            merge_kernel: 31,
            merge_mode: MergeMode::Additive,
            dropout: 0.1,
            attention_dropout: 0.1,
            stochastic_depth: 0.0,
            feat_dim: 80,
        };
        Some(match name {
            "medium-conformer-deep" => medium,
            "medium-conformer-wide" => EncoderConfig { layers: 12, ffn_expansion: 8, ..medium },
            "medium-ebranchformer" => EncoderConfig {
                kind: LayerKind::EBranchformer,
                layers: 12,
                ..medium
            },
            "large-ebranchformer" => EncoderConfig {
                kind: LayerKind::EBranchformer,
                layers: 17,
                d: 512,
                heads: 8,
                ffn_expansion: 2,
                mlp_expansion: 6,
                ..medium
            },
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 4] = [
        "medium-conformer-deep",
        "medium-conformer-wide",
        "medium-ebranchformer",
        "large-ebranchformer",
    ];

    /// Small configuration used by the toy task and tests.
    pub fn toy(kind: LayerKind, layers: usize, d: usize, heads: usize, feat_dim: usize) -> Self {
        EncoderConfig {
            kind,
            layers,
            d,
            heads,
            ffn_expansion: 4,
            mlp_expansion: 4,
            conv_kernel: 15,
            mlp_kernel: 15,
            merge_kernel: 3,
            merge_mode: MergeMode::Additive,
            dropout: 0.1,
            attention_dropout: 0.1,
            stochastic_depth: 0.0,
            feat_dim,
        }
    }
}
