use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_greedy_decode, ctc_loss, token_error_rate};
use crate::encoder::spec_augment;
use crate::model::{model_forward, Model};
use crate::nn::{Ctx, Mode, ParamStore, SeqMask};
use crate::tensor::Tensor;
use crate::Tape;

use super::config::RunConfig;
use super::optim::{clip_global_norm, Adam, WarmupSchedule};
use super::synth::{bucket, gen_split, Batch, Split, Utterance};
use super::HarnessError;

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Validation loss above this multiple of the pre-training value counts as
/// divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub initial_val_loss: f64,
    pub initial_val_ter: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub best_epoch: Option<usize>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_loss, |e| e.val_loss)
    }

    pub fn final_ter(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_ter, |e| e.val_ter)
    }

    /// `step,lr,loss` rows; floats use the shortest exact representation.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.steps {
            s += &format!("{},{:?},{:?}\n", r.step, r.lr, r.loss);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub ter: f64,
}

/// Eval-mode loss (utterance-weighted mean) and greedy token error rate.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[Utterance], budget: usize) -> Result<Evaluation, HarnessError> {
    let mut loss_sum = 0.0;
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for group in bucket(data, budget) {
        let items: Vec<&Utterance> = group.iter().map(|&i| &data[i]).collect();
        let batch = Batch::collate(&items, model.config.encoder.feat_dim);
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, store, Mode::Eval, 0);
        let mask = SeqMask::new(batch.lengths.clone(), batch.feats.shape()[1])?;
        let (lp, sub) = model_forward(&ctx, ctx.constant(batch.feats), &mask, model)?;
        let loss = ctc_loss(lp, &batch.labels, sub.lengths())?.value().item();
        loss_sum += loss * items.len() as f64;
        hyps.extend(ctc_greedy_decode(&lp.value(), sub.lengths()));
        refs.extend(batch.labels);
    }
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        ter: token_error_rate(&hyps, &refs),
    })
}

/// Greedy transcripts for `data`, in order.
pub fn decode(model: &Model, store: &ParamStore, data: &[Utterance], budget: usize) -> Result<Vec<Vec<usize>>, HarnessError> {
    let mut out = vec![Vec::new(); data.len()];
    for group in bucket(data, budget) {
        let items: Vec<&Utterance> = group.iter().map(|&i| &data[i]).collect();
        let batch = Batch::collate(&items, model.config.encoder.feat_dim);
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, store, Mode::Eval, 0);
        let mask = SeqMask::new(batch.lengths.clone(), batch.feats.shape()[1])?;
        let (lp, sub) = model_forward(&ctx, ctx.constant(batch.feats), &mask, model)?;
        for (k, hyp) in ctc_greedy_decode(&lp.value(), sub.lengths()).into_iter().enumerate() {
            out[group[k]] = hyp;
        }
    }
    Ok(out)
}

/// Everything a finished run leaves behind besides its files.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Model,
    pub store: ParamStore,
}

/// Trains from scratch. With `out` set, writes the config, `run.json`,
/// `metrics.csv` and the best checkpoint there.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    }
    let t = &cfg.train;
    let train_set = gen_split(&cfg.task, Split::Train)?;
    let valid_set = gen_split(&cfg.task, Split::Valid)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(t.seed);
    let (model, mut store) = Model::init(&cfg.model_config(), &mut init_rng)?;
    let mut adam = Adam::new(&store);
    adam.weight_decay = t.weight_decay;
    let schedule = WarmupSchedule {
        peak_lr: t.peak_lr,
        warmup_steps: t.warmup_steps,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x6f72_6465_72);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x6175_6700);
    let groups = bucket(&train_set, t.batch_frames);

    let initial = evaluate(&model, &store, &valid_set, t.batch_frames)?;
    let mut record = RunRecord {
        run_id: format!("{}-{}-s{}", model.config.encoder.kind.as_str(), &cfg.digest()[..12], t.seed),
        seed: t.seed,
        config_digest: cfg.digest(),
        initial_val_loss: initial.loss,
        initial_val_ter: initial.ter,
        steps: Vec::new(),
        epochs: Vec::new(),
        diverged: false,
        divergence: None,
        best_epoch: None,
        wall_time_secs: 0.0,
    };
    let mut best = f64::INFINITY;
    let mut step = 0usize;

    'epochs: for epoch in 1..=t.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for &g in &order {
            step += 1;
            let lr = schedule.lr_at(step)?;
            let items: Vec<&Utterance> = groups[g].iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::collate(&items, cfg.task.feat_dim);
            let feats = spec_augment(&batch.feats, &batch.lengths, &cfg.specaug, &mut aug_rng)?;
            let (loss, grads, updates) = forward_backward(&model, &store, &adam, &batch, feats, t.seed, step)?;
            let loss = if step == t.nan_at_step { f64::NAN } else { loss };
            record.steps.push(StepRecord { step, lr, loss });
            if !loss.is_finite() {
                record.diverged = true;
                record.divergence = Some(format!("non-finite training loss at step {step}"));
                break 'epochs;
            }
            epoch_loss += loss;
            let mut grads = grads;
            clip_global_norm(&mut grads, t.clip_norm);
            adam.update(&mut store, &grads, lr)?;
            for (id, value) in updates {
                store.set(id, value);
            }
        }
        let eval = evaluate(&model, &store, &valid_set, t.batch_frames)?;
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            val_loss: eval.loss,
            val_ter: eval.ter,
        });
        if !eval.loss.is_finite() || eval.loss > DIVERGENCE_FACTOR * initial.loss {
            record.diverged = true;
            record.divergence = Some(format!(
                "validation loss {} at epoch {epoch} against initial {}",
                eval.loss, initial.loss
            ));
            break;
        }
        if eval.loss < best {
            best = eval.loss;
            record.best_epoch = Some(epoch);
            if let Some(dir) = out {
                store.save(&dir.join(CHECKPOINT_DIR))?;
            }
        }
    }
    record.wall_time_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        if record.best_epoch.is_none() {
            store.save(&dir.join(CHECKPOINT_DIR))?;
        }
        fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&record)?)?;
        fs::File::create(dir.join(METRICS_FILE))?.write_all(record.metrics_csv().as_bytes())?;
    }
    Ok(TrainOutcome { record, model, store })
}

type StepResult = (f64, Vec<Tensor>, Vec<(crate::nn::ParamId, Tensor)>);

fn forward_backward(
    model: &Model,
    store: &ParamStore,
    adam: &Adam,
    batch: &Batch,
    feats: Tensor,
    seed: u64,
    step: usize,
) -> Result<StepResult, HarnessError> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Train, seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64));
    let mask = SeqMask::new(batch.lengths.clone(), feats.shape()[1])?;
    let (lp, sub) = model_forward(&ctx, ctx.constant(feats), &mask, model)?;
    let loss = ctc_loss(lp, &batch.labels, sub.lengths())?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Ok((value, Vec::new(), Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let vars = ctx.param_vars();
    let per_param = adam.ids().iter().map(|id| grads.wrt(vars[id.index()])).collect();
    Ok((value, per_param, ctx.take_buffer_updates()))
}

/// Config, model and best checkpoint of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, Model, ParamStore), HarnessError> {
    let cfg = RunConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let (model, mut store) = Model::init(&cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    store.load_values(&dir.join(CHECKPOINT_DIR))?;
    Ok((cfg, model, store))
}
