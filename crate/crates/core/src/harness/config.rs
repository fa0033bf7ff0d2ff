use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, LayerKind, MergeMode, SpecAugmentConfig};
use crate::model::ModelConfig;

use super::synth::TaskSpec;
use super::HarnessError;

/// `[model]` section: the encoder without its input width, which comes
/// from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: LayerKind,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub mlp_expansion: usize,
    pub conv_kernel: usize,
    pub mlp_kernel: usize,
    pub merge_kernel: usize,
    pub merge_mode: MergeMode,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub stochastic_depth: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: LayerKind::EBranchformer,
            layers: 2,
            d: 64,
            heads: 4,
            ffn_expansion: 4,
            mlp_expansion: 4,
            conv_kernel: 15,
            mlp_kernel: 15,
            merge_kernel: 3,
            merge_mode: MergeMode::Additive,
            dropout: 0.1,
            attention_dropout: 0.1,
            stochastic_depth: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Upper bound on `batch × padded length` in input frames.
    pub batch_frames: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Fault injection: force a NaN loss at this step (0 = never).
    pub nan_at_step: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            peak_lr: 2e-3,
            warmup_steps: 60,
            epochs: 8,
            batch_frames: 1600,
            seed: 1,
            clip_norm: 5.0,
            weight_decay: 0.0,
            nan_at_step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub task: TaskSpec,
    pub train: TrainSection,
    pub specaug: SpecAugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            task: TaskSpec::default(),
            train: TrainSection::default(),
            specaug: SpecAugmentConfig {
                time_masks: 1,
                max_time_width: 8,
                freq_masks: 1,
                max_freq_width: 2,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            encoder: EncoderConfig {
                kind: m.kind,
                layers: m.layers,
                d: m.d,
                heads: m.heads,
                ffn_expansion: m.ffn_expansion,
                mlp_expansion: m.mlp_expansion,
                conv_kernel: m.conv_kernel,
                mlp_kernel: m.mlp_kernel,
                merge_kernel: m.merge_kernel,
                merge_mode: m.merge_mode,
                dropout: m.dropout,
                attention_dropout: m.attention_dropout,
                stochastic_depth: m.stochastic_depth,
                feat_dim: self.task.feat_dim,
            },
            vocab: self.task.vocab,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model_config().encoder.validate()?;
        self.task.validate()?;
        let t = &self.train;
        if !(t.peak_lr >= 0.0 && t.peak_lr.is_finite()) {
            return Err(HarnessError::Config(format!("peak_lr={} must be finite and >= 0", t.peak_lr)));
        }
        if t.warmup_steps == 0 {
            return Err(HarnessError::Config("warmup_steps must be positive".into()));
        }
        if t.clip_norm < 0.0 || t.weight_decay < 0.0 {
            return Err(HarnessError::Config("clip_norm and weight_decay must be >= 0".into()));
        }
        let longest = self.task.max_label_len * self.task.max_frames_per_token;
        if t.batch_frames < longest {
            return Err(HarnessError::Config(format!(
                "batch_frames={} cannot hold the longest utterance ({longest} frames)",
                t.batch_frames
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
