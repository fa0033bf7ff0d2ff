//! Schedule, optimizer, synthetic data, trainer and sweep behaviour.

use branchkit::ctc::min_frames;
use branchkit::encoder::LayerKind;
use branchkit::harness::*;
use branchkit::model::Model;
use branchkit::nn::{subsampled_len, ParamStore};
use branchkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_run() -> RunConfig {
    let mut cfg = stability_toy_config();
    cfg.task.train_size = 32;
    cfg.task.valid_size = 16;
    cfg.train.epochs = 2;
    cfg
}

// -- schedule ------------------------------------------------------------------

#[test]
fn warmup_examples() {
    let s = WarmupSchedule {
        peak_lr: 2e-3,
        warmup_steps: 40,
    };
    assert_eq!(s.lr_at(40).unwrap(), 2e-3);
    assert!((s.lr_at(10).unwrap() - 5e-4).abs() < 1e-18);
    assert!((s.lr_at(160).unwrap() - 1e-3).abs() < 1e-18);
    assert!(s.lr_at(0).is_err());
}

#[test]
fn warmup_shape_over_ten_warmups() {
    for w in [1, 3, 25, 64] {
        let s = WarmupSchedule {
            peak_lr: 0.7,
            warmup_steps: w,
        };
        let lrs: Vec<f64> = (1..=10 * w).map(|k| s.lr_at(k).unwrap()).collect();
        for k in 1..lrs.len() {
            let step = k + 1;
            if step <= w {
                assert!(lrs[k] >= lrs[k - 1], "w={w} step={step}");
            } else {
                assert!(lrs[k] <= lrs[k - 1], "w={w} step={step}");
            }
            assert!(lrs[k] <= 0.7 && lrs[k] > 0.0);
        }
        assert_eq!(s.lr_at(w).unwrap(), 0.7);
    }
}

// -- optimizer --------------------------------------------------------------------

fn scalar_store(values: &[f64]) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, &v) in values.iter().enumerate() {
        store.add(format!("p{i}"), Tensor::new(&[1], vec![v]).unwrap());
    }
    store
}

#[test]
fn adam_scalar_by_hand() {
    let mut store = scalar_store(&[0.3]);
    let mut adam = Adam::new(&store);
    let id = adam.ids()[0];
    let lr = 0.01;
    // step 1, g = 1: m = 0.1, v = 0.02, both corrections give exactly 1
    adam.update(&mut store, &[Tensor::new(&[1], vec![1.0]).unwrap()], lr).unwrap();
    let p1 = 0.3 - lr * 1.0 / (1.0 + 1e-9);
    assert!((store.get(id).item() - p1).abs() < 1e-15);
    // step 2, g = -2
    adam.update(&mut store, &[Tensor::new(&[1], vec![-2.0]).unwrap()], lr).unwrap();
    let m = 0.9 * 0.1 + 0.1 * -2.0;
    let v = 0.98 * 0.02 + 0.02 * 4.0;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.98f64 * 0.98));
    let p2 = p1 - lr * mh / (vh.sqrt() + 1e-9);
    assert!((store.get(id).item() - p2).abs() < 1e-15);
    assert!((adam.first_moment(0)[0] - m).abs() < 1e-15);
}

#[test]
fn adam_zero_gradient_and_symmetry() {
    let mut store = scalar_store(&[1.5, -0.25]);
    let before = store.clone();
    let mut adam = Adam::new(&store);
    let zeros = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
    adam.update(&mut store, &zeros, 0.1).unwrap();
    for id in store.ids() {
        assert_eq!(store.get(id), before.get(id));
    }
    assert_eq!(adam.first_moment(0), &[0.0]);

    // one real step, then a zero gradient only decays the moment
    let g = vec![Tensor::new(&[1], vec![0.4]).unwrap(), Tensor::zeros(&[1])];
    adam.update(&mut store, &g, 0.1).unwrap();
    let m = adam.first_moment(0)[0];
    adam.update(&mut store, &zeros, 0.1).unwrap();
    assert!((adam.first_moment(0)[0] - 0.9 * m).abs() < 1e-16);

    let mut twin = scalar_store(&[0.8, 0.8]);
    let mut adam = Adam::new(&twin);
    for k in 0..5 {
        let g = Tensor::new(&[1], vec![(k as f64).sin()]).unwrap();
        adam.update(&mut twin, &[g.clone(), g], 0.05).unwrap();
    }
    let ids: Vec<_> = twin.ids().collect();
    assert_eq!(twin.get(ids[0]), twin.get(ids[1]));
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut store = scalar_store(&[1.0]);
    let mut adam = Adam::new(&store);
    assert!(adam.update(&mut store, &[], 0.1).is_err());
    assert!(adam.update(&mut store, &[Tensor::zeros(&[2])], 0.1).is_err());
}

#[test]
fn global_norm_clipping() {
    let mut g = vec![Tensor::new(&[2], vec![3.0, 0.0]).unwrap(), Tensor::new(&[1], vec![4.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[0].data(), &[3.0, 0.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    let mut g = vec![Tensor::new(&[1], vec![100.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 0.0), 100.0);
    assert_eq!(g[0].data(), &[100.0]);
}

// -- synthetic task -----------------------------------------------------------------

#[test]
fn noiseless_fixed_rate_features_repeat_templates() {
    let spec = TaskSpec {
        noise: 0.0,
        min_frames_per_token: 9,
        max_frames_per_token: 9,
        ..TaskSpec::default()
    };
    let templates = spec.templates().unwrap();
    let batch = gen_synthetic_batch(&spec, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (t, f) = (batch.feats.shape()[1], spec.feat_dim);
    for (b, labels) in batch.labels.iter().enumerate() {
        assert_eq!(batch.lengths[b], 9 * labels.len());
        for (k, &tok) in labels.iter().enumerate() {
            for j in 0..9 {
                let off = (b * t + 9 * k + j) * f;
                assert_eq!(&batch.feats.data()[off..off + f], templates[tok].as_slice());
            }
        }
        let pad_start = (b * t + batch.lengths[b]) * f;
        assert!(batch.feats.data()[pad_start..(b + 1) * t * f].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn templates_are_separated() {
    let spec = TaskSpec::default();
    let rows = spec.templates().unwrap();
    assert_eq!(rows.len(), spec.vocab + 1);
    for i in 1..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(d >= 2.0, "{i} {j} {d}");
        }
    }
}

#[test]
fn same_seed_same_batch() {
    let spec = TaskSpec::default();
    let a = gen_synthetic_batch(&spec, 6, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b = gen_synthetic_batch(&spec, 6, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(gen_split(&spec, Split::Valid).unwrap(), gen_split(&spec, Split::Valid).unwrap());
    assert_ne!(gen_split(&spec, Split::Train).unwrap()[0], gen_split(&spec, Split::Valid).unwrap()[0]);
}

#[test]
fn utterances_are_admissible_after_subsampling() {
    for repeats in [false, true] {
        let spec = TaskSpec {
            repeats,
            vocab: 3,
            min_label_len: 1,
            max_label_len: 8,
            min_frames_per_token: 9,
            max_frames_per_token: 10,
            train_size: 400,
            ..TaskSpec::default()
        };
        spec.validate().unwrap();
        for u in gen_split(&spec, Split::Train).unwrap() {
            assert!(subsampled_len(u.frames).unwrap() >= min_frames(&u.labels));
            if !repeats {
                assert!(u.labels.windows(2).all(|w| w[0] != w[1]));
            }
        }
    }
    // too few frames per token for repeated labels after 4x subsampling
    let spec = TaskSpec {
        repeats: true,
        min_frames_per_token: 4,
        ..TaskSpec::default()
    };
    assert!(spec.validate().is_err());
}

#[test]
fn buckets_respect_the_frame_budget() {
    let spec = TaskSpec::default();
    let utts = gen_split(&spec, Split::Train).unwrap();
    let groups = bucket(&utts, 900);
    let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
    seen.sort();
    assert_eq!(seen, (0..utts.len()).collect::<Vec<_>>());
    let mut last = 0;
    for g in &groups {
        let longest = g.iter().map(|&i| utts[i].frames).max().unwrap();
        assert!(g.len() == 1 || g.len() * longest <= 900);
        assert!(utts[g[0]].frames >= last);
        last = longest;
    }
}

// -- config -----------------------------------------------------------------------

#[test]
fn config_round_trip_and_digest() {
    let cfg = RunConfig::default();
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    let mut other = cfg.clone();
    other.train.seed += 1;
    assert_ne!(other.digest(), cfg.digest());

    let partial = RunConfig::from_toml("[model]\nkind = \"conformer\"\nd = 32\n[train]\nepochs = 3\n").unwrap();
    assert_eq!(partial.model.kind, LayerKind::Conformer);
    assert_eq!(partial.model.d, 32);
    assert_eq!(partial.train.epochs, 3);
    assert_eq!(partial.task, TaskSpec::default());

    assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
    assert!(RunConfig::from_toml("[model]\nd = 30\nheads = 4\n").is_err());
    assert!(RunConfig::from_toml("[train]\nwarmup_steps = 0\n").is_err());
}

// -- training ------------------------------------------------------------------------

#[test]
fn zero_epochs_give_an_empty_trajectory() {
    let mut cfg = small_run();
    cfg.train.epochs = 0;
    let rec = train(&cfg, None).unwrap().record;
    assert!(rec.steps.is_empty() && rec.epochs.is_empty());
    assert!(!rec.diverged);
    assert_eq!(rec.metrics_csv(), "step,lr,loss\n");
}

#[test]
fn zero_lr_leaves_trainable_parameters_untouched() {
    for kind in [LayerKind::Conformer, LayerKind::EBranchformer] {
        let mut cfg = small_run();
        cfg.model.kind = kind;
        cfg.train.peak_lr = 0.0;
        let out = train(&cfg, None).unwrap();
        let (_, fresh) = Model::init(&cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed)).unwrap();
        for id in fresh.trainable_ids() {
            assert_eq!(out.store.get(id), fresh.get(id), "{}", fresh.name(id));
        }
        let rec = &out.record;
        assert!(rec.steps.iter().all(|s| s.lr == 0.0));
        if kind == LayerKind::EBranchformer {
            // no running statistics, so evaluation is a fixed function
            for e in &rec.epochs {
                assert_eq!(e.val_loss, rec.initial_val_loss);
            }
        }
    }
}

#[test]
fn nan_injection_marks_divergence_and_stops() {
    let mut cfg = small_run();
    let per_epoch = bucket(&gen_split(&cfg.task, Split::Train).unwrap(), cfg.train.batch_frames).len();
    cfg.train.nan_at_step = per_epoch + 1;
    let rec = train(&cfg, None).unwrap().record;
    assert!(rec.diverged);
    assert_eq!(rec.steps.len(), per_epoch + 1);
    assert!(rec.steps[per_epoch].loss.is_nan());
    assert!(rec.steps[..per_epoch].iter().all(|s| s.loss.is_finite()));
    assert_eq!(rec.epochs.len(), 1);
    assert!(rec.divergence.as_deref().unwrap().contains("non-finite"));
}

#[test]
fn huge_lr_is_flagged_by_validation_loss() {
    let mut cfg = small_run();
    cfg.train.peak_lr = 50.0;
    cfg.train.epochs = 3;
    let rec = train(&cfg, None).unwrap().record;
    assert!(rec.diverged);
    let last = rec.epochs.last().unwrap();
    assert!(!last.val_loss.is_finite() || last.val_loss > 10.0 * rec.initial_val_loss || rec.steps.iter().any(|s| !s.loss.is_finite()));
}

#[test]
fn runs_are_deterministic_and_persisted() {
    let cfg = small_run();
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, Some(dir.path())).unwrap();
    let b = train(&cfg, None).unwrap();
    assert_eq!(a.record.steps, b.record.steps);
    assert_eq!(a.record.epochs, b.record.epochs);
    assert_eq!(a.record.run_id, b.record.run_id);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, a.record.metrics_csv());
    assert_eq!(csv.lines().count(), a.record.steps.len() + 1);
    let saved: RunRecord = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(saved.steps, a.record.steps);
    assert_eq!(saved.config_digest, cfg.digest());
    let saved_cfg = RunConfig::from_toml(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved_cfg, cfg);

    // the checkpoint holds the best epoch; here the loss falls every epoch
    let best = a.record.best_epoch.unwrap();
    assert_eq!(best, a.record.epochs.len());
    let store = ParamStore::load(&dir.path().join("checkpoint")).unwrap();
    let valid = gen_split(&cfg.task, Split::Valid).unwrap();
    let e = evaluate(&a.model, &store, &valid, cfg.train.batch_frames).unwrap();
    assert_eq!(e.loss, a.record.epochs[best - 1].val_loss);
    let hyps = decode(&a.model, &store, &valid, cfg.train.batch_frames).unwrap();
    assert_eq!(hyps.len(), valid.len());
}

// -- sweeps --------------------------------------------------------------------------

#[test]
fn sweep_bookkeeping() {
    let mut base = small_run();
    base.train.epochs = 1;
    assert!(stability_experiment(&base, &[LayerKind::Conformer], &[1e-3], 1, None).is_err());

    let dir = tempfile::tempdir().unwrap();
    let archs = [LayerKind::EBranchformer, LayerKind::Conformer];
    let report = stability_experiment(&base, &archs, &[1e-3, 100.0], 2, Some(dir.path())).unwrap();
    assert_eq!(report.runs.len(), 8);
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        assert_eq!(c.runs, 2);
    }
    let order: Vec<(LayerKind, f64, u64)> = report.runs.iter().map(|r| (r.arch, r.peak_lr, r.seed)).collect();
    assert_eq!(order[0], (LayerKind::EBranchformer, 1e-3, base.train.seed));
    assert_eq!(order[3], (LayerKind::EBranchformer, 100.0, base.train.seed + 1));
    assert_eq!(order[7], (LayerKind::Conformer, 100.0, base.train.seed + 1));
    assert_eq!(report.cell(LayerKind::Conformer, 1e-3).unwrap().diverged, 0);
    assert_eq!(report.cell(LayerKind::Conformer, 100.0).unwrap().diverged, 2);

    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary, report.summary_csv());
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("arch,peak_lr,seed,diverged,final_val_loss,final_ter"));
    assert_eq!(lines.count(), 8);
    assert!(dir.path().join("curves.csv").exists());
    assert!(dir.path().join("runs").read_dir().unwrap().count() == 8);
}
