use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::HarnessError;

/// `lr(s) = peak · min(s/w, √(w/s))` for steps `s ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn lr_at(&self, step: usize) -> Result<f64, HarnessError> {
        if step == 0 {
            return Err(HarnessError::Config("learning-rate steps start at 1".into()));
        }
        if self.warmup_steps == 0 {
            return Err(HarnessError::Config("warmup_steps must be positive".into()));
        }
        let (s, w) = (step as f64, self.warmup_steps as f64);
        Ok(self.peak_lr * (s / w).min((w / s).sqrt()))
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Zeroed moments for every trainable tensor of `store`.
    pub fn new(store: &ParamStore) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).numel()];
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    /// One bias-corrected update. `grads[i]` belongs to `ids()[i]`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), HarnessError> {
        if grads.len() != self.ids.len() {
            return Err(HarnessError::Config(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.ids.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.numel() != self.m[i].len() {
                return Err(HarnessError::Config(format!(
                    "adam: gradient {:?} does not match {}",
                    g.shape(),
                    store.name(self.ids[i])
                )));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let id = self.ids[i];
            let mut p = store.get(id).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, pj) in p.iter_mut().enumerate() {
                let gj = g.data()[j] + self.weight_decay * *pj;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *pj -= lr * step;
            }
            store.set(id, Tensor::new(store.get(id).shape(), p).expect("same shape"));
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm = 0` only measures.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * k);
        }
    }
    norm
}
