//! Synthetic stand-in for speech: each token is a fixed random feature
//! template held for a few frames, plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::min_frames;
use crate::nn::subsampled_len;
use crate::tensor::Tensor;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab: usize,
    pub feat_dim: usize,
    pub min_label_len: usize,
    pub max_label_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise: f64,
    /// Whether a token may directly follow itself.
    pub repeats: bool,
    pub train_size: usize,
    pub valid_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab: 10,
            feat_dim: 16,
            min_label_len: 2,
            max_label_len: 6,
            min_frames_per_token: 10,
            max_frames_per_token: 14,
            noise: 0.5,
            repeats: false,
            train_size: 320,
            valid_size: 64,
            seed: 7,
        }
    }
}

/// Smallest distance allowed between two token templates.
pub const MIN_TEMPLATE_DISTANCE: f64 = 2.0;

impl TaskSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.vocab == 0 || (!self.repeats && self.vocab < 2 && self.max_label_len > 1) {
            return bad(format!("vocab={} too small for the label lengths", self.vocab));
        }
        if self.min_label_len == 0 || self.min_label_len > self.max_label_len {
            return bad("label lengths must satisfy 1 <= min <= max".into());
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return bad("frames per token must satisfy 1 <= min <= max".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise={} must be finite and >= 0", self.noise));
        }
        if self.train_size == 0 || self.valid_size == 0 {
            return bad("train_size and valid_size must be positive".into());
        }
        // every label sequence must remain emittable after subsampling
        for l in self.min_label_len..=self.max_label_len {
            let frames = l * self.min_frames_per_token;
            let need = if self.repeats { 2 * l - 1 } else { l };
            match subsampled_len(frames) {
                Some(t) if t >= need => {}
                _ => {
                    return bad(format!(
                        "{l} tokens at {} frames each leave too few encoder frames for CTC",
                        self.min_frames_per_token
                    ))
                }
            }
        }
        Ok(())
    }

    /// Token templates `[V+1, F]`, row 0 unused; redrawn until every pair is
    /// at least [`MIN_TEMPLATE_DISTANCE`] apart.
    pub fn templates(&self) -> Result<Vec<Vec<f64>>, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..1000 {
            let mut rows = vec![vec![0.0; self.feat_dim]];
            for _ in 0..self.vocab {
                rows.push((0..self.feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect());
            }
            let distinct = (1..rows.len()).all(|i| {
                (1..i).all(|j| {
                    let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b): (&f64, &f64)| (a - b).powi(2)).sum();
                    d2.sqrt() >= MIN_TEMPLATE_DISTANCE
                })
            });
            if distinct {
                return Ok(rows);
            }
        }
        Err(HarnessError::Config("could not draw distinct token templates".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// `frames × F`, row major.
    pub feats: Vec<f64>,
    pub frames: usize,
    pub labels: Vec<usize>,
}

pub fn gen_utterance(spec: &TaskSpec, templates: &[Vec<f64>], rng: &mut impl Rng) -> Utterance {
    let l = rng.random_range(spec.min_label_len..=spec.max_label_len);
    let mut labels: Vec<usize> = Vec::with_capacity(l);
    while labels.len() < l {
        let tok = rng.random_range(1..=spec.vocab);
        if spec.repeats || labels.last() != Some(&tok) {
            labels.push(tok);
        }
    }
    let mut feats = Vec::new();
    for &tok in &labels {
        let n = rng.random_range(spec.min_frames_per_token..=spec.max_frames_per_token);
        for _ in 0..n {
            for &v in &templates[tok] {
                let e: f64 = StandardNormal.sample(rng);
                feats.push(v + spec.noise * e);
            }
        }
    }
    let frames = feats.len() / spec.feat_dim;
    debug_assert!(subsampled_len(frames).is_some_and(|t| t >= min_frames(&labels)));
    Utterance { feats, frames, labels }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

/// The whole split, reproducible from the task seed alone.
pub fn gen_split(spec: &TaskSpec, split: Split) -> Result<Vec<Utterance>, HarnessError> {
    spec.validate()?;
    let templates = spec.templates()?;
    let (n, salt) = match split {
        Split::Train => (spec.train_size, 0x7472_6169_6e00),
        Split::Valid => (spec.valid_size, 0x7661_6c69_6400),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);
    Ok((0..n).map(|_| gen_utterance(spec, &templates, &mut rng)).collect())
}

/// Padded features `[B, T, F]`, lengths and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub feats: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn collate(items: &[&Utterance], feat_dim: usize) -> Batch {
        let t = items.iter().map(|u| u.frames).max().unwrap_or(0);
        let mut data = vec![0.0; items.len() * t * feat_dim];
        for (b, u) in items.iter().enumerate() {
            data[b * t * feat_dim..b * t * feat_dim + u.feats.len()].copy_from_slice(&u.feats);
        }
        Batch {
            feats: Tensor::new(&[items.len(), t, feat_dim], data).expect("collated size"),
            lengths: items.iter().map(|u| u.frames).collect(),
            labels: items.iter().map(|u| u.labels.clone()).collect(),
        }
    }
}

/// Index groups: utterances sorted by length (stable), cut whenever the
/// padded size `count × longest` would exceed `budget` frames.
pub fn bucket(utts: &[Utterance], budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| utts[i].frames);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        let longest = utts[i].frames;
        if !cur.is_empty() && (cur.len() + 1) * longest > budget {
            groups.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups
}

/// One padded batch of `n` fresh utterances.
pub fn gen_synthetic_batch(spec: &TaskSpec, n: usize, rng: &mut impl Rng) -> Result<Batch, HarnessError> {
    spec.validate()?;
    let templates = spec.templates()?;
    let utts: Vec<Utterance> = (0..n).map(|_| gen_utterance(spec, &templates, rng)).collect();
    let refs: Vec<&Utterance> = utts.iter().collect();
    Ok(Batch::collate(&refs, spec.feat_dim))
}
