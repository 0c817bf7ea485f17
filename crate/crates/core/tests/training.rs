mod common;

use dsne::data::{Dataset, Domain};
use dsne::mean_teacher::{self, AugmentConfig, EmaState, MeanTeacher, SemiConfig};
use dsne::net::{self, ModelParams};
use dsne::sampler::{rng_from_seed, select_few_shot, FewShotSplit};
use dsne::trainer::{self, MetricsRecord, TrainConfig, TrainData};
use dsne::Error;

use common::{blob_config, blobs};

struct World {
    source: Dataset,
    target: Dataset,
}

fn world(seed: u64) -> World {
    World {
        source: blobs(3, 30, Domain::Source, seed),
        target: blobs(3, 20, Domain::Target, seed + 1000),
    }
}

fn run(cfg: &TrainConfig, w: &World, shots: usize) -> (trainer::Trained, FewShotSplit) {
    let split = select_few_shot(&w.target, shots, cfg.seed).unwrap();
    let data = TrainData {
        source: &w.source,
        split: &split,
        source_eval: None,
    };
    (trainer::train(cfg, &data, |_| Ok(())).unwrap(), split)
}

fn recomposed(r: &MetricsRecord, cfg: &TrainConfig, lambda: f64) -> f64 {
    r.loss_dsne + cfg.alpha * r.loss_ce_s + cfg.beta * r.loss_ce_t + lambda * r.loss_consistency
}

#[test]
fn dsne_reaches_full_target_accuracy_where_source_only_does_not() {
    for seed in 1..=5 {
        let cfg = blob_config(seed);
        let w = world(seed);
        let (adapted, split) = run(&cfg, &w, 3);
        let acc = trainer::evaluate(adapted.networks.target(), &split.eval_target).unwrap();
        assert_eq!(acc, 1.0, "seed {seed}: adapted target accuracy {acc}");

        let (baseline, split0) = run(&cfg, &w, 0);
        let base = trainer::evaluate(baseline.networks.target(), &split0.eval_target).unwrap();
        assert!(base < 1.0, "seed {seed}: source-only reached {base}");
        let src = trainer::evaluate(&baseline.networks.source, &w.source).unwrap();
        assert!(src > 0.95, "seed {seed}: source-only fits its own domain at {src}");
    }
}

#[test]
fn zero_shots_train_on_the_source_alone() {
    let cfg = blob_config(2);
    let (out, split) = run(&cfg, &world(2), 0);
    assert!(split.labeled_target.is_empty());
    for r in &out.history {
        assert_eq!(r.loss_dsne, 0.0);
        assert_eq!(r.loss_ce_t, 0.0);
        assert!(r.loss_ce_s > 0.0);
        assert!((r.loss_total - cfg.alpha * r.loss_ce_s).abs() <= 1e-9);
    }
}

#[test]
fn breakdown_identity_holds_in_every_record() {
    let cfg = TrainConfig {
        alpha: 0.3,
        beta: 0.7,
        ..blob_config(4)
    };
    let (out, _) = run(&cfg, &world(4), 2);
    assert_eq!(out.history.len(), cfg.epochs);
    for r in &out.history {
        assert!((r.loss_total - recomposed(r, &cfg, 0.0)).abs() <= 1e-9);
        assert_eq!(r.loss_consistency, 0.0);
    }
}

#[test]
fn accuracies_are_reported_on_the_evaluation_schedule() {
    let cfg = TrainConfig {
        epochs: 7,
        eval_every: 3,
        ..blob_config(1)
    };
    let (out, _) = run(&cfg, &world(1), 2);
    let evaluated: Vec<usize> = out.history.iter().filter(|r| r.target_acc.is_some()).map(|r| r.epoch).collect();
    assert_eq!(evaluated, vec![3, 6, 7]);
    for r in &out.history {
        if let Some(a) = r.target_acc {
            assert!((0.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn identical_seeds_give_identical_histories_and_weights() {
    let cfg = blob_config(6);
    let w = world(6);
    let (a, _) = run(&cfg, &w, 2);
    let (b, _) = run(&cfg, &w, 2);
    let lines = |h: &[MetricsRecord]| h.iter().map(|r| r.to_json_line()).collect::<Vec<_>>();
    assert_eq!(lines(&a.history), lines(&b.history));
    assert_eq!(a.networks, b.networks);
    let (c, _) = run(&TrainConfig { seed: 7, ..cfg }, &w, 2);
    assert_ne!(lines(&a.history), lines(&c.history));
}

#[test]
fn separate_networks_train_independently_initialised() {
    let cfg = TrainConfig {
        shared_weights: false,
        ..blob_config(3)
    };
    let (out, split) = run(&cfg, &world(3), 3);
    assert!(!out.networks.is_shared());
    assert_ne!(out.networks.source, *out.networks.target());
    let acc = trainer::evaluate(out.networks.target(), &split.eval_target).unwrap();
    assert!(acc > 0.9, "unshared target accuracy {acc}");
}

#[test]
fn likelihood_mode_trains() {
    let cfg = TrainConfig {
        loss_mode: dsne::loss::LossMode::Likelihood,
        // Unbounded below on raw distances; normalising keeps it finite.
        normalize_embeddings: true,
        ..blob_config(2)
    };
    let (out, split) = run(&cfg, &world(2), 3);
    let acc = trainer::evaluate(out.networks.target(), &split.eval_target).unwrap();
    assert!(acc > 0.9, "likelihood-mode target accuracy {acc}");
}

fn zeroed(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    p.values_mut().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
    p
}

#[test]
fn constant_logits_score_the_first_class_frequency() {
    let w = world(1);
    let params = zeroed(&net::init_params(1, &common::blob_arch(3)).unwrap());
    let first = w.target.subset("first-heavy", &[0, 3, 6, 1, 2]);
    let acc = trainer::evaluate(&params, &first).unwrap();
    assert_eq!(acc, 3.0 / 5.0);
    let empty = w.target.subset("none", &[]);
    assert!(matches!(trainer::evaluate(&params, &empty), Err(Error::Domain(_))));
}

#[test]
fn training_does_not_hurt_the_labeled_shots() {
    let cfg = blob_config(8);
    let w = world(8);
    let split = select_few_shot(&w.target, 3, cfg.seed).unwrap();
    let before = trainer::evaluate(&net::init_params(cfg.seed, &cfg.arch).unwrap(), &split.labeled_target).unwrap();
    let (out, split) = run(&cfg, &w, 3);
    let after = trainer::evaluate(out.networks.target(), &split.labeled_target).unwrap();
    assert!(after >= before, "{after} < {before}");
}

#[test]
fn exported_embeddings_have_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blob_config(1);
    let params = net::init_params(1, &cfg.arch).unwrap();
    let ds = world(1).target;
    let path = dir.path().join("e.csv");
    trainer::export_embeddings(&params, &ds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), ds.len() + 1);
    assert_eq!(lines[0], trainer::embedding_header(cfg.arch.embedding_dim));
    for (line, s) in lines[1..].iter().zip(&ds.samples) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 2 + cfg.arch.embedding_dim);
        assert_eq!(fields[0], "target");
        assert_eq!(fields[1], s.label.to_string());
        assert!(fields[2..].iter().all(|f| f.parse::<f64>().unwrap().is_finite()));
    }
    let again = dir.path().join("f.csv");
    trainer::export_embeddings(&params, &ds, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let empty = dir.path().join("empty.csv");
    trainer::export_embeddings(&params, &ds.subset("none", &[]), &empty).unwrap();
    assert_eq!(std::fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let unwritable = dir.path().join("missing").join("x.csv");
    assert!(matches!(trainer::export_embeddings(&params, &ds, &unwritable), Err(Error::Io { .. })));
}

fn semi(epochs: usize) -> SemiConfig {
    SemiConfig {
        epochs,
        steps_per_epoch: Some(5),
        unlabeled_batch: 8,
        augment: AugmentConfig {
            max_translate: 0,
            crop_pad: 0,
            noise_std: 0.02,
            flip_enabled: false,
        },
        ..Default::default()
    }
}

#[test]
fn teacher_starts_as_the_trained_network_and_moves_only_by_ema() {
    let cfg = TrainConfig {
        epochs: 5,
        ..blob_config(2)
    };
    let w = world(2);
    let (trained, split) = run(&cfg, &w, 3);
    let semi = semi(1);
    let mut mt = MeanTeacher::from_supervised(&cfg, &semi, &trained).unwrap();
    assert_eq!(mt.teacher(), trained.networks.target());
    assert_eq!(mt.student(), &trained.networks);

    let data = TrainData {
        source: &w.source,
        split: &split,
        source_eval: None,
    };
    let mut rng = rng_from_seed(77);
    for _ in 0..5 {
        let before = mt.teacher().clone();
        let sum_before = before.checksum();
        mt.step(&cfg, &semi, &data, &mut rng).unwrap();
        // Replaying only the EMA on the old teacher must give the new one.
        let mut ema = EmaState::new(before, semi.ema_decay).unwrap();
        ema.update(mt.student().target()).unwrap();
        assert_eq!(ema.teacher().checksum(), mt.teacher().checksum());
        assert_ne!(sum_before, mt.teacher().checksum());
    }
}

#[test]
fn identity_views_of_a_copied_teacher_start_with_zero_consistency() {
    let cfg = TrainConfig {
        epochs: 3,
        ..blob_config(5)
    };
    let w = world(5);
    let (trained, split) = run(&cfg, &w, 2);
    let semi = SemiConfig {
        augment: AugmentConfig::identity(),
        ..semi(1)
    };
    let mut mt = MeanTeacher::from_supervised(&cfg, &semi, &trained).unwrap();
    let data = TrainData {
        source: &w.source,
        split: &split,
        source_eval: None,
    };
    let (loss, _) = mt.step(&cfg, &semi, &data, &mut rng_from_seed(1)).unwrap();
    assert_eq!(loss.consistency, 0.0);
    let (later, _) = mt.step(&cfg, &semi, &data, &mut rng_from_seed(2)).unwrap();
    assert!(later.consistency > 0.0);
}

#[test]
fn semi_supervised_runs_continue_numbering_and_keep_the_identity() {
    let cfg = TrainConfig {
        epochs: 4,
        ..blob_config(3)
    };
    let w = world(3);
    let split = select_few_shot(&w.target, 2, cfg.seed).unwrap();
    let data = TrainData {
        source: &w.source,
        split: &split,
        source_eval: Some(&w.source),
    };
    let semi = semi(3);
    let mut seen = Vec::new();
    let out = mean_teacher::train_semi_supervised(&cfg, &semi, &data, |r| {
        seen.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, out.history);
    assert_eq!(out.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    for r in &out.history[4..] {
        assert!((r.loss_total - recomposed(r, &cfg, semi.consistency_weight)).abs() <= 1e-9);
        assert!(r.loss_consistency > 0.0);
    }
    let last = out.history.last().unwrap();
    let teacher_acc = trainer::evaluate(&out.teacher, &split.eval_target).unwrap();
    assert_eq!(last.target_acc, Some(teacher_acc));
    assert_eq!(out.evaluation_networks().target(), &out.teacher);
}

#[test]
fn empty_unlabeled_pool_is_a_protocol_error() {
    let cfg = TrainConfig {
        epochs: 1,
        ..blob_config(1)
    };
    let w = world(1);
    let mut split = select_few_shot(&w.target, 2, 1).unwrap();
    split.unlabeled_pool.clear();
    let data = TrainData {
        source: &w.source,
        split: &split,
        source_eval: None,
    };
    let err = mean_teacher::train_semi_supervised(&cfg, &semi(1), &data, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn callback_errors_stop_training() {
    let cfg = blob_config(1);
    let w = world(1);
    let split = select_few_shot(&w.target, 1, 1).unwrap();
    let data = TrainData {
        source: &w.source,
        split: &split,
        source_eval: None,
    };
    let mut calls = 0;
    let err = trainer::train(&cfg, &data, |_| {
        calls += 1;
        Err(Error::Protocol("stop".into()))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(calls, 1);
}

#[test]
fn divergent_learning_rates_abort_with_a_numeric_error() {
    let cfg = TrainConfig {
        lr: 1e6,
        momentum: 0.99,
        ..blob_config(1)
    };
    let w = world(1);
    let split = select_few_shot(&w.target, 2, 1).unwrap();
    let data = TrainData {
        source: &w.source,
        split: &split,
        source_eval: None,
    };
    let err = trainer::train(&cfg, &data, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}
