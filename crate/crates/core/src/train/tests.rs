use super::*;
use crate::data::{generate_drift, split_stages, DriftScenario, StageMode, StagePlan, Staged};

fn staged(seed: u64) -> Staged {
    let sc = DriftScenario {
        n_categories: 3,
        items_per_category: 6,
        stage_popularity: vec![vec![0.6, 0.4, 0.0], vec![0.1, 0.4, 0.5]],
        sessions_per_stage: 60,
        min_session_len: 3,
        max_session_len: 6,
        stage_seconds: 10_000,
        follow_prob: 0.0,
        switch_prob: 0.0,
        seed,
    };
    let plan = StagePlan {
        mode: StageMode::FixedWindow { seconds: 10_000 },
        k_core: 2,
        max_seq_len: 5,
        valid_fraction: 0.2,
    };
    split_stages(&generate_drift(&sc).unwrap(), &plan, seed).unwrap()
}

fn tiny(n_items: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        max_seq_len: 5,
        dropout_rate: 0.2,
        n_items,
    }
}

fn quick(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        batch_size: 32,
        learning_rate: 5e-3,
        max_epochs: 3,
        patience: 5,
        seed: 4,
        ..Default::default()
    }
}

fn experiment(strategy: Strategy) -> Experiment {
    Experiment {
        model: tiny(1),
        train: quick(strategy),
        screening: ScreeningConfig::default(),
        contrastive: ContrastiveConfig::default(),
    }
}

fn final_hashes(out: &[StageOutcome]) -> Vec<String> {
    out.iter().map(|o| o.result.params.sha256()).collect()
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
    }
    assert!("ader".parse::<Strategy>().is_err());
}

#[test]
fn zero_alpha_matches_finetune_bit_for_bit() {
    let data = staged(1);
    let mut sa = experiment(Strategy::SaCaisr);
    sa.train.alpha = 0.0;
    let ft = experiment(Strategy::Finetune);
    let a = run_experiment(&data, &sa, &mut ()).unwrap();
    let b = run_experiment(&data, &ft, &mut ()).unwrap();
    assert_eq!(final_hashes(&a), final_hashes(&b));
    // the conflict machinery really ran
    assert!(a[1].result.steps.iter().any(|s| s.regularizer > 0.0));
}

#[test]
fn zero_lambda_ewc_matches_finetune() {
    let data = staged(2);
    let mut ewc = experiment(Strategy::Ewc);
    ewc.train.ewc_lambda = 0.0;
    let a = run_experiment(&data, &ewc, &mut ()).unwrap();
    let b = run_experiment(&data, &experiment(Strategy::Finetune), &mut ()).unwrap();
    assert_eq!(final_hashes(&a), final_hashes(&b));
}

#[test]
fn zero_p_max_uses_the_unmasked_reference() {
    let data = staged(3);
    let mut a = experiment(Strategy::SaCaisr);
    a.screening.p_max = 0.0;
    let mut b = experiment(Strategy::SaCaisr);
    b.train.fisher_mask = false;
    let a = run_experiment(&data, &a, &mut ()).unwrap();
    let b = run_experiment(&data, &b, &mut ()).unwrap();
    assert_eq!(final_hashes(&a), final_hashes(&b));
}

#[test]
fn total_loss_decomposes() {
    let data = staged(4);
    let mut e = experiment(Strategy::SaCaisr);
    e.train.alpha = 0.7;
    let out = run_experiment(&data, &e, &mut ()).unwrap();
    for s in &out[1].result.steps {
        assert_eq!(s.weight, 0.7);
        assert!((s.total - (s.ce + 0.7 * s.regularizer)).abs() < 1e-12);
    }
    let e = experiment(Strategy::Ewc);
    let out = run_experiment(&data, &e, &mut ()).unwrap();
    for s in &out[1].result.steps {
        assert!((s.total - (s.ce + s.regularizer)).abs() < 1e-12);
    }
}

struct Frozen {
    hashes: Vec<(String, String)>,
    masked_after_batch: bool,
}

impl Observer for Frozen {
    fn after_batch(&mut self, e: &BatchEvent<'_>) {
        if let Some(r) = e.reference {
            self.hashes.push((r.frozen_hash().to_string(), r.current_hash()));
            self.masked_after_batch |= r.is_masked();
        }
    }
}

#[test]
fn reference_stays_frozen() {
    let data = staged(5);
    let mut obs = Frozen {
        hashes: Vec::new(),
        masked_after_batch: false,
    };
    let out = run_experiment(&data, &experiment(Strategy::SaCaisr), &mut obs).unwrap();
    assert!(!obs.hashes.is_empty());
    let start = out[0].result.params.sha256();
    for (frozen, now) in &obs.hashes {
        assert_eq!(frozen, &now[..]);
        // the reference is the previous stage's parameters (grown rows aside)
        assert_eq!(frozen.len(), start.len());
    }
    assert!(!obs.masked_after_batch);
}

#[test]
fn single_step_matches_hand_adam() {
    let data = staged(6);
    let stage = &data.stages[0];
    let cfg = ModelConfig {
        dropout_rate: 0.0,
        ..tiny(stage.vocab_size)
    };
    let init = cfg.init(&mut Rng::new(8)).unwrap();
    let train_cfg = TrainConfig {
        strategy: Strategy::Finetune,
        batch_size: stage.train.len(),
        max_epochs: 1,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let r = train_stage(&init, &cfg, 0, &stage.train, &stage.valid, &train_cfg, Penalty::None, &mut ()).unwrap();

    let (batch, targets) = batch_of(stage.train.iter(), &cfg).unwrap();
    let g = reference_gradients(&init, &cfg, &batch, &targets).unwrap();
    for (name, w0) in init.iter() {
        let w1 = r.params.get(name).unwrap();
        for ((a, b), gi) in w0.data().iter().zip(w1.data()).zip(g.get(name).unwrap().data()) {
            // first Adam step: m̂ = g, v̂ = g²
            let expected = a - 1e-2 * gi / (gi.abs() + ADAM_EPS);
            assert!((b - expected).abs() < 1e-8, "{name}: {b} vs {expected}");
        }
    }
}

#[test]
fn early_stopping_respects_patience() {
    let data = staged(7);
    let stage = &data.stages[0];
    let cfg = tiny(stage.vocab_size);
    let init = cfg.init(&mut Rng::new(9)).unwrap();
    let train_cfg = TrainConfig {
        strategy: Strategy::Finetune,
        batch_size: 16,
        learning_rate: 0.05,
        max_epochs: 40,
        patience: 2,
        ..Default::default()
    };
    let r = train_stage(&init, &cfg, 0, &stage.train, &stage.valid, &train_cfg, Penalty::None, &mut ()).unwrap();
    assert!(r.epochs_run <= r.best_epoch + 2);
    let vals: Vec<f64> = r.val_recall20.iter().map(|v| v.unwrap()).collect();
    let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(vals[r.best_epoch - 1], best);
    assert_eq!(vals.iter().position(|&v| v == best).unwrap() + 1, r.best_epoch);
    let again = crate::evaluation::evaluate_stage(0, &r.params, &cfg, &stage.valid, train_cfg.eval_options()).unwrap();
    assert_eq!(again.recall20(), best);
}

#[test]
fn overflowing_parameters_abort_with_context() {
    let data = staged(10);
    let stage = &data.stages[0];
    let cfg = tiny(stage.vocab_size);
    let mut init = cfg.init(&mut Rng::new(1)).unwrap();
    init.get_mut("blocks.0.ffn.w1").unwrap().data_mut().fill(1e200);
    init.get_mut("blocks.0.ffn.w2").unwrap().data_mut().fill(1e200);
    let err = train_stage(&init, &cfg, 3, &stage.train, &stage.valid, &quick(Strategy::Finetune), Penalty::None, &mut ())
        .unwrap_err();
    match err {
        Error::NanLoss { stage, epoch, batch, tensor } => {
            assert_eq!((stage, epoch, batch), (3, 1, 0));
            assert!(!tensor.is_empty());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn empty_stage_is_rejected() {
    let cfg = tiny(4);
    let init = cfg.init(&mut Rng::new(1)).unwrap();
    assert!(matches!(
        train_stage(&init, &cfg, 0, &[], &[], &quick(Strategy::Finetune), Penalty::None, &mut ()),
        Err(Error::EmptyStage { .. })
    ));
}

#[test]
fn strategies_beat_the_random_floor_on_repeated_stages() {
    let sc = DriftScenario {
        n_categories: 2,
        items_per_category: 30,
        stage_popularity: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        sessions_per_stage: 80,
        min_session_len: 3,
        max_session_len: 6,
        stage_seconds: 10_000,
        follow_prob: 0.0,
        switch_prob: 0.0,
        seed: 11,
    };
    let plan = StagePlan {
        mode: StageMode::FixedWindow { seconds: 10_000 },
        k_core: 2,
        max_seq_len: 5,
        valid_fraction: 0.2,
    };
    let data = split_stages(&generate_drift(&sc).unwrap(), &plan, 0).unwrap();
    let mut exp = experiment(Strategy::Finetune);
    exp.train.max_epochs = 8;
    let all = run_strategies(&data, &exp, &Strategy::ALL, &mut ()).unwrap();
    for runs in &all {
        let report = runs[0].test.as_ref().unwrap();
        assert!(report.recall20() >= 20.0 / data.stages[0].vocab_size as f64, "{}", report.recall20());
        assert!(runs[1].test.is_none());
    }
}

#[test]
fn stage_level_fisher_and_kl_run() {
    let data = staged(12);
    let mut e = experiment(Strategy::SaCaisr);
    e.train.fisher_schedule = FisherSchedule::Stage;
    e.train.regularizer = Regularizer::Kl;
    e.train.shared_forward = false;
    let out = run_experiment(&data, &e, &mut ()).unwrap();
    let f = out[1].fisher.as_ref().unwrap();
    assert!(f.scores().iter().any(|(_, t)| t.data().iter().any(|&v| v > 0.0)));
    assert!(out[1].result.steps.iter().all(|s| s.regularizer >= -1e-12));
}

#[test]
fn persisted_fisher_is_carried_and_resized() {
    let sc = DriftScenario {
        n_categories: 3,
        items_per_category: 5,
        stage_popularity: vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.3, 0.3, 0.4]],
        sessions_per_stage: 40,
        min_session_len: 3,
        max_session_len: 5,
        stage_seconds: 10_000,
        follow_prob: 0.0,
        switch_prob: 0.0,
        seed: 13,
    };
    let plan = StagePlan {
        mode: StageMode::FixedWindow { seconds: 10_000 },
        k_core: 2,
        max_seq_len: 5,
        valid_fraction: 0.2,
    };
    let data = split_stages(&generate_drift(&sc).unwrap(), &plan, 0).unwrap();
    let mut e = experiment(Strategy::SaCaisr);
    e.screening.persist_fisher = true;
    let out = run_experiment(&data, &e, &mut ()).unwrap();
    let f = out[2].fisher.as_ref().unwrap();
    assert!(f.scores().same_layout(&out[2].result.params));
}
