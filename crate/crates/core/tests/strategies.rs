mod common;

use clbench::evalmetrics::{run_metrics, TimeBasis};
use clbench::memory::Sample;
use clbench::model::{Matrix, MlpParams};
use clbench::strategies::*;
use clbench::streamgen::{
    generate_world, make_mtnc_stream, make_ni_stream, Batch, Protocol, Stream, WorldConfig,
};
use clbench::Error;
use common::{desk_stream, mean};

fn model() -> ModelConfig {
    ModelConfig::default()
}

fn json(log: &TrainLog) -> String {
    serde_json::to_string(&log.without_wall_clock()).unwrap()
}

fn assert_same_log(a: &TrainLog, b: &TrainLog) {
    assert_eq!(a.without_wall_clock(), b.without_wall_clock());
    assert_eq!(json(a), json(b));
}

#[test]
fn berr_without_replay_or_review_is_naive() {
    for (protocol, seed) in [(Protocol::Nic, 0), (Protocol::MtNc, 1), (Protocol::Ni, 2)] {
        let s = desk_stream(protocol, seed);
        let mut cfg = StrategyConfig::of(StrategyKind::Berr).with_seed(seed);
        cfg.replay_sz = 0;
        cfg.review_sz = 0;
        cfg.lr = cfg.lr_replay;
        let berr = run_berr(&s, &model(), &cfg).unwrap();
        let naive = run_naive(&s, &model(), &cfg).unwrap();
        assert_same_log(&berr, &naive);
    }
}

#[test]
fn rehearsal_with_zero_quota_is_naive() {
    for (protocol, seed) in [(Protocol::Nic, 3), (Protocol::MtNc, 4)] {
        let s = desk_stream(protocol, seed);
        let mut cfg = StrategyConfig::default().with_seed(seed);
        cfg.growing_quota = 0;
        let reh = run_rehearsal_baseline(&s, &model(), &cfg).unwrap();
        let naive = run_naive(&s, &model(), &cfg).unwrap();
        assert_same_log(&reh, &naive);
    }
}

#[test]
fn drl_with_zero_weight_is_plain_replay() {
    for (protocol, seed) in [(Protocol::MtNc, 5), (Protocol::Nic, 6)] {
        let s = desk_stream(protocol, seed);
        let mut cfg = StrategyConfig::of(StrategyKind::Drl).with_seed(seed);
        cfg.drl.lambda = 0.0;
        let drl = run_drl(&s, &model(), &cfg).unwrap();
        let replay = run_replay(&s, &model(), &cfg).unwrap();
        assert_same_log(&drl, &replay);
        assert!(!drl.alignment.is_empty());
    }
}

#[test]
fn drl_with_positive_weight_changes_the_trajectory() {
    let s = desk_stream(Protocol::MtNc, 0);
    let cfg = StrategyConfig::of(StrategyKind::Drl);
    let drl = run_drl(&s, &model(), &cfg).unwrap();
    let replay = run_replay(&s, &model(), &cfg).unwrap();
    assert_ne!(drl.batch_loss, replay.batch_loss);
}

#[test]
fn every_log_has_one_validation_entry_per_batch() {
    for kind in [
        StrategyKind::Naive,
        StrategyKind::Rehearsal,
        StrategyKind::Berr,
        StrategyKind::Replay,
        StrategyKind::Drl,
        StrategyKind::FrozenOnline,
        StrategyKind::Multihead,
    ] {
        let s = desk_stream(Protocol::MtNc, 7);
        let cfg = StrategyConfig::of(kind);
        let log = run(&s, &model(), &cfg).unwrap();
        let batches = s.batches().len();
        assert_eq!(log.val_acc.len(), batches, "{kind}");
        assert_eq!(log.batch_loss.len(), batches, "{kind}");
        assert_eq!(log.memory_items.len(), batches, "{kind}");
        assert!(log.resources.len() >= batches * cfg.epochs, "{kind}");
        assert_eq!(log.stream_hash_before, s.content_hash());
        assert_eq!(log.stream_hash_before, log.stream_hash_after);
        assert!(run_metrics(&log, TimeBasis::Work).is_ok());
    }
}

#[test]
fn naive_forgets_the_first_task() {
    let s = desk_stream(Protocol::MtNc, 0);
    let cfg = StrategyConfig::default();
    let after_first = run_naive(&s.truncated(1).unwrap(), &model(), &cfg).unwrap();
    let at_end = run_naive(&s, &model(), &cfg).unwrap();
    let before = after_first.per_task_test_acc[&0];
    let after = at_end.per_task_test_acc[&0];
    assert!(before > 0.9, "task 0 accuracy right after training: {before}");
    assert!(after < 0.2, "task 0 accuracy at the end: {after}");
}

#[test]
fn zero_epochs_leave_the_model_untrained() {
    let s = desk_stream(Protocol::Ni, 0);
    let cfg = StrategyConfig {
        epochs: 0,
        ..StrategyConfig::default()
    };
    let log = run_naive(&s, &model(), &cfg).unwrap();
    assert_eq!(log.steps, 0);
    assert!(log.final_test_acc < 0.35, "untrained accuracy {}", log.final_test_acc);
}

#[test]
fn single_batch_naive_learns_the_batch() {
    let s = desk_stream(Protocol::Ni, 1).truncated(1).unwrap();
    let trained = train(&s, &model(), &StrategyConfig::default(), RunOptions::default()).unwrap();
    let seen = to_samples(&s.batches()[0].examples);
    assert!(evaluate(&trained.model, &seen, None).unwrap().accuracy > 0.9);
    assert!(trained.log.final_test_acc > 0.5);
}

#[test]
fn zero_model_predicts_class_zero_everywhere() {
    let s = desk_stream(Protocol::Nic, 0);
    let test = final_test_set(&s, 0.2);
    let zero = MlpParams::<f64>::zeros(&[s.feature_dim(), 8, s.n_classes()]).unwrap();
    let r = evaluate(&zero, &test, None).unwrap();
    let class0 = test.iter().filter(|x| x.label == 0).count() as f64 / test.len() as f64;
    assert_eq!(r.accuracy, class0);
    assert!(evaluate(&zero, &[], None).is_err());
}

#[test]
fn tiny_set_is_memorized() {
    let cfg = WorldConfig::desk();
    let world = generate_world(&cfg).unwrap();
    let s = make_ni_stream(&world, &cfg).unwrap().truncated(1).unwrap();
    let train_set = to_samples(&s.batches()[0].examples[..40]);
    let mut params = MlpParams::init(&[s.feature_dim(), 64, s.n_classes()], 1).unwrap();
    let x = Matrix::from_rows(&train_set.iter().map(|t| t.features.clone()).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = train_set.iter().map(|t| t.label as usize).collect();
    for _ in 0..500 {
        let trace = params.forward(&x).unwrap();
        let (_, g) = clbench::model::xent_loss_grad(&params.chain(), &trace, &labels).unwrap();
        params.descend(&g, 0.1).unwrap();
    }
    assert_eq!(evaluate(&params, &train_set, None).unwrap().accuracy, 1.0);
}

#[test]
fn rehearsal_memory_grows_by_quota_per_batch() {
    let cfg = WorldConfig {
        n_sessions: 11,
        n_train_sessions: 8,
        examples_per_class_session: 3,
        ..WorldConfig::desk()
    };
    let world = generate_world(&cfg).unwrap();
    let s = make_ni_stream(&world, &cfg).unwrap();
    let strat = StrategyConfig {
        epochs: 1,
        ..StrategyConfig::default()
    };
    let log = run_rehearsal_baseline(&s, &model(), &strat).unwrap();
    assert_eq!(log.memory_items, (1..=8).map(|b| 20 * b).collect::<Vec<_>>());
}

#[test]
fn berr_on_one_batch_still_reviews() {
    let s = desk_stream(Protocol::Nic, 0).truncated(1).unwrap();
    let n = s.batches()[0].examples.len();
    let cfg = StrategyConfig::of(StrategyKind::Berr);
    let log = run_berr(&s, &model(), &cfg).unwrap();
    let per_epoch = n.div_ceil(cfg.minibatch) as u64;
    let review = cfg.review_sz.min(n).div_ceil(cfg.minibatch) as u64;
    assert_eq!(log.steps, cfg.epochs as u64 * per_epoch + review);
    assert!(log.notes.iter().any(|m| m.contains("clamped")));
}

#[test]
fn berr_rejects_review_rate_above_replay_rate() {
    let s = desk_stream(Protocol::Nic, 0);
    let cfg = StrategyConfig {
        lr_review: 0.5,
        ..StrategyConfig::of(StrategyKind::Berr)
    };
    assert!(matches!(run_berr(&s, &model(), &cfg), Err(Error::Config(_))));
}

#[test]
fn frozen_online_is_single_pass() {
    let s = desk_stream(Protocol::Ni, 0);
    let cfg = StrategyConfig {
        epochs: 2,
        ..StrategyConfig::of(StrategyKind::FrozenOnline)
    };
    assert!(matches!(
        run_frozen_feature_online(&s, &model(), &cfg),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn frozen_online_stores_projected_items() {
    let s = desk_stream(Protocol::Ni, 0);
    let narrow = ModelConfig {
        projection_dim: 16,
        ..model()
    };
    let cfg = StrategyConfig::of(StrategyKind::FrozenOnline);
    let log = run_frozen_feature_online(&s, &narrow, &cfg).unwrap();
    let items = *log.memory_items.last().unwrap();
    let raw = Sample {
        features: vec![0.0f64; s.feature_dim()],
        label: 0,
        task: None,
    };
    let projected = Sample {
        features: vec![0.0f64; 16],
        label: 0,
        task: None,
    };
    assert_eq!(projected.stored_bytes(), 16 * 8);
    assert!(projected.stored_bytes() < raw.stored_bytes());
    let snapshot = log.resources.last().unwrap();
    assert!(snapshot.ram_bytes >= (items * projected.stored_bytes()) as u64);
}

#[test]
fn frozen_online_matches_rehearsal_on_ni_with_less_work() {
    let s = desk_stream(Protocol::Ni, 0);
    let frozen = run_frozen_feature_online(&s, &model(), &StrategyConfig::of(StrategyKind::FrozenOnline)).unwrap();
    let reh = run_rehearsal_baseline(&s, &model(), &StrategyConfig::default()).unwrap();
    assert!(frozen.final_test_acc >= reh.final_test_acc - 0.10);
    assert!(frozen.work_units < reh.work_units);
}

#[test]
fn multihead_quota_after_nine_tasks() {
    let cfg = WorldConfig::desk();
    let world = generate_world(&cfg).unwrap();
    let s = make_mtnc_stream(&world, &cfg, 2, 1).unwrap();
    assert_eq!(s.batches().len(), 9);
    let strat = StrategyConfig {
        quota_budget: 100,
        ..StrategyConfig::of(StrategyKind::Multihead)
    };
    let dir = tempfile::tempdir().unwrap();
    let trained = train(
        &s,
        &model(),
        &strat,
        RunOptions {
            budget: Budget::default(),
            meter: clbench::evalmetrics::ResourceMeter::new().with_disk_dir(dir.path()),
        },
    )
    .unwrap();
    let log = trained.log;
    let expected: Vec<usize> = (0..9).map(|i| (i + 1) * (100 / (i + 1))).collect();
    assert_eq!(log.memory_items, expected);
    assert_eq!(*log.memory_items.last().unwrap(), 9 * (100 / 9));
    assert!(log.resources.iter().any(|r| r.disk_bytes > 0));
    let dumped = std::fs::read(dir.path().join("exemplars.clb")).unwrap();
    assert_eq!(clbench::memory::load_dump::<f64>(&dumped).unwrap().len(), 99);
}

#[test]
fn in_ram_strategies_use_no_disk() {
    let s = desk_stream(Protocol::Nic, 0);
    let log = run_berr(&s, &model(), &StrategyConfig::of(StrategyKind::Berr)).unwrap();
    assert!(log.resources.iter().all(|r| r.disk_bytes == 0));
}

#[test]
fn multihead_single_task_is_supervised_training() {
    let s = desk_stream(Protocol::MtNc, 0).truncated(1).unwrap();
    let log = run_multihead_pipeline(&s, &model(), &StrategyConfig::of(StrategyKind::Multihead)).unwrap();
    assert!(log.per_task_test_acc[&0] > 0.9);
    // Test items of tasks that never arrived have no head to route to.
    assert!(log.per_task_test_acc.iter().all(|(&t, &a)| t == 0 || a == 0.0));
}

#[test]
fn multihead_beats_naive_per_task() {
    for seed in 0..3 {
        let s = desk_stream(Protocol::MtNc, seed);
        let mh = run_multihead_pipeline(&s, &model(), &StrategyConfig::of(StrategyKind::Multihead).with_seed(seed)).unwrap();
        let naive = run_naive(&s, &model(), &StrategyConfig::default().with_seed(seed)).unwrap();
        let last = *naive.per_task_test_acc.keys().last().unwrap();
        for (t, &acc) in &naive.per_task_test_acc {
            let m = mh.per_task_test_acc[t];
            if *t == last {
                assert!(m >= acc - 0.02, "seed {seed} task {t}: {m} vs {acc}");
            } else {
                assert!(m > acc, "seed {seed} task {t}: {m} vs {acc}");
            }
        }
    }
}

#[test]
fn multihead_needs_task_labels() {
    let s = desk_stream(Protocol::Nic, 0);
    let r = run_multihead_pipeline(&s, &model(), &StrategyConfig::of(StrategyKind::Multihead));
    assert!(matches!(r, Err(Error::Protocol(_))));
    let r = run(&s, &model(), &StrategyConfig::of(StrategyKind::Multihead));
    assert!(matches!(r, Err(Error::Protocol(_))));
}

#[test]
fn drl_logs_alignment_for_every_later_batch() {
    let s = desk_stream(Protocol::MtNc, 0);
    let log = run_drl(&s, &model(), &StrategyConfig::of(StrategyKind::Drl)).unwrap();
    let batches: Vec<usize> = log.alignment.iter().map(|a| a.batch).collect();
    assert_eq!(batches, (1..s.batches().len()).collect::<Vec<_>>());
    assert!(log.alignment.iter().all(|a| (-1.0..=1.0).contains(&a.cosine)));
}

#[test]
fn drl_is_not_worse_than_plain_replay() {
    let (mut drl, mut plain, mut cosine) = (vec![], vec![], vec![]);
    for seed in 0..5 {
        let s = desk_stream(Protocol::MtNc, seed);
        let cfg = StrategyConfig::of(StrategyKind::Drl).with_seed(seed);
        let d = run_drl(&s, &model(), &cfg).unwrap();
        cosine.extend(d.alignment.iter().map(|a| a.cosine));
        drl.push(d.final_test_acc);
        let zero = StrategyConfig {
            drl: clbench::model::DrlConfig {
                lambda: 0.0,
                ..cfg.drl.clone()
            },
            ..cfg
        };
        plain.push(run_drl(&s, &model(), &zero).unwrap().final_test_acc);
    }
    println!(
        "DRL {:.3} vs lambda=0 {:.3}, mean cosine {:.3}",
        mean(&drl),
        mean(&plain),
        mean(&cosine)
    );
    assert!(mean(&drl) >= mean(&plain) - 0.02);
}

#[test]
fn step_budget_stops_the_run() {
    let s = desk_stream(Protocol::Nic, 0);
    let trained = train(
        &s,
        &model(),
        &StrategyConfig::default(),
        RunOptions {
            budget: Budget {
                max_steps: Some(1),
                max_seconds: None,
            },
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(trained.log.over_budget);
    assert_eq!(trained.log.steps, 1);
}

#[test]
fn divergence_is_a_numeric_error() {
    let s = desk_stream(Protocol::Nic, 0);
    let cfg = StrategyConfig {
        lr: 1e200,
        ..StrategyConfig::default()
    };
    assert!(matches!(run_naive(&s, &model(), &cfg), Err(Error::Numeric(_))));
}

/// Laplace-smoothed label frequencies of a stream's training batches.
fn smoothed_priors(s: &Stream) -> Vec<f64> {
    let c = s.n_classes();
    let mut counts = vec![0.0; c];
    let mut total = 0.0;
    for b in s.batches() {
        for e in &b.examples {
            counts[e.label as usize] += 1.0;
            total += 1.0;
        }
    }
    counts.iter().map(|n| (n + 1.0) / (total + c as f64)).collect()
}

/// NI stream whose odd classes keep only every `keep`-th training example.
fn imbalanced_ni(seed: u64, keep: usize) -> Stream {
    let s = desk_stream(Protocol::Ni, seed);
    let batches = s
        .batches()
        .iter()
        .map(|b| Batch {
            examples: b
                .examples
                .iter()
                .enumerate()
                .filter(|(i, e)| e.label % 2 == 0 || i % keep == 0)
                .map(|(_, e)| e.clone())
                .collect(),
            task: None,
        })
        .collect();
    Stream::new(s.protocol(), s.feature_dim(), s.seed(), batches, s.test_set().to_vec()).unwrap()
}

#[test]
fn prior_correction_does_not_hurt_minority_classes() {
    for seed in 0..5 {
        let s = imbalanced_ni(seed, 10);
        let cfg = StrategyConfig {
            prior_correction: true,
            ..StrategyConfig::default().with_seed(seed)
        };
        let trained = train(&s, &model(), &cfg, RunOptions::default()).unwrap();
        let priors = smoothed_priors(&s);
        let test = final_test_set(&s, cfg.validation_fraction);
        let plain = evaluate(&trained.model, &test, None).unwrap();
        let corrected = evaluate(&trained.model, &test, Some(&priors)).unwrap();
        assert_eq!(corrected.accuracy, trained.log.final_test_acc);
        let minority: Vec<usize> = (0..priors.len()).filter(|&c| priors[c] < mean(&priors)).collect();
        assert_eq!(minority.len(), 5);
        let avg = |r: &EvalResult| mean(&minority.iter().map(|&c| r.per_class[c].unwrap()).collect::<Vec<_>>());
        println!("seed {seed}: minority accuracy {:.3} corrected vs {:.3} plain", avg(&corrected), avg(&plain));
        assert!(avg(&corrected) >= avg(&plain));
    }
}
