//! Three-stage drift benchmark: one category fades out and comes back, one
//! emerges, one stays put. Stage 0 is trained once; each arm then trains
//! stage 1 from that model and is tested on stage 2 and on held-back
//! sessions of the stable category.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::consistency::{ContrastiveConfig, Representation};
use crate::data::{build_samples, filter_test, generate_drift, generate_probe, split_stages, DriftScenario, Sample, Session, StageMode, StagePlan, Staged};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_stage, EvalOptions};
use crate::model::{ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::screening::{FisherState, ScreeningConfig};
use crate::train::{train_stage, FisherSchedule, Penalty, Regularizer, Strategy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Scratch,
    /// CE only from the previous model; also the "neither component" arm.
    Finetune,
    /// Fisher-masked reference with the KL fallback in place of InfoNCE.
    FisherOnly,
    /// Unmasked reference with contrastive alignment.
    InfonceOnly,
    /// Fisher-masked reference with contrastive alignment.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Scratch, Arm::Finetune, Arm::FisherOnly, Arm::InfonceOnly, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Scratch => "scratch",
            Arm::Finetune => "finetune",
            Arm::Full => "full",
            Arm::FisherOnly => "fisher-only",
            Arm::InfonceOnly => "infonce-only",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftBenchmark {
    /// `seed` is replaced per run.
    pub scenario: DriftScenario,
    pub plan: StagePlan,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub screening: ScreeningConfig,
    pub contrastive: ContrastiveConfig,
    pub fading_category: usize,
    pub emerging_category: usize,
    pub stable_category: usize,
    pub probe_sessions: usize,
}

impl DriftBenchmark {
    /// 8 categories of 50 items, about 10k events per stage.
    pub fn standard() -> Self {
        let stage_seconds = 1_000_000;
        Self {
            scenario: DriftScenario {
                n_categories: 8,
                items_per_category: 50,
                stage_popularity: vec![
                    vec![0.35, 0.00, 0.15, 0.10, 0.10, 0.10, 0.10, 0.10],
                    vec![0.02, 0.35, 0.13, 0.10, 0.10, 0.10, 0.10, 0.10],
                    vec![0.35, 0.15, 0.15, 0.07, 0.07, 0.07, 0.07, 0.07],
                ],
                sessions_per_stage: 1_800,
                min_session_len: 3,
                max_session_len: 8,
                stage_seconds,
                seed: 0,
                follow_prob: 0.7,
                switch_prob: 0.5,
            },
            plan: StagePlan {
                mode: StageMode::FixedWindow { seconds: stage_seconds },
                k_core: 2,
                max_seq_len: 8,
                valid_fraction: 0.1,
            },
            model: ModelConfig {
                hidden_dim: 32,
                n_blocks: 1,
                n_heads: 1,
                max_seq_len: 8,
                dropout_rate: 0.2,
                n_items: 1,
            },
            train: TrainConfig {
                alpha: 1.0,
                batch_size: 128,
                learning_rate: 2e-3,
                max_epochs: 30,
                patience: 3,
                ..Default::default()
            },
            screening: ScreeningConfig::default(),
            contrastive: ContrastiveConfig {
                representation: Representation::Scores,
                ..Default::default()
            },
            fading_category: 0,
            emerging_category: 1,
            stable_category: 2,
            probe_sessions: 300,
        }
    }

    pub fn data(&self, seed: u64) -> Result<Staged> {
        let sc = DriftScenario {
            seed,
            ..self.scenario.clone()
        };
        let staged = split_stages(&generate_drift(&sc)?, &self.plan, seed)?;
        if staged.stages.len() != 3 {
            return Err(Error::Invalid(format!("benchmark expects 3 stages, got {}", staged.stages.len())));
        }
        Ok(staged)
    }

    fn probe(&self, staged: &Staged, seed: u64, known: usize) -> Result<Vec<Sample>> {
        let sessions: Vec<Session> = generate_probe(&self.scenario, self.stable_category, self.probe_sessions, seed)?
            .into_iter()
            .map(|items| Session {
                user: String::new(),
                items: items.iter().filter_map(|id| staged.items.index_of(id)).collect(),
            })
            .collect();
        Ok(filter_test(build_samples(&sessions, self.plan.max_seq_len), known))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            exclude_prefix_items: self.train.exclude_prefix_items,
            batch_size: 512,
        }
    }

    /// Trains the first stage (CE only) for `seed`.
    pub fn base(&self, seed: u64) -> Result<Base> {
        let staged = self.data(seed)?;
        let stage = &staged.stages[0];
        let cfg = self.model.with_items(stage.vocab_size);
        let init = cfg.init(&mut Rng::with_stream(seed, 30_000))?;
        let train = TrainConfig {
            seed,
            strategy: Strategy::Finetune,
            ..self.train.clone()
        };
        let r = train_stage(&init, &cfg, 0, &stage.train, &stage.valid, &train, Penalty::None, &mut ())?;
        let probe = self.probe(&staged, seed, stage.vocab_size)?;
        let probe_recall = evaluate_stage(0, &r.params, &cfg, &probe, self.eval_options())?.recall20();
        Ok(Base {
            seed,
            staged,
            model: cfg,
            params: r.params,
            probe,
            probe_recall,
        })
    }

    /// Trains the second stage under `arm` from `base` and scores it.
    pub fn run_arm(&self, base: &Base, arm: Arm) -> Result<ArmResult> {
        let stage = &base.staged.stages[1];
        let seed = base.seed;
        let mut init_rng = Rng::with_stream(seed, 30_001);
        let (cfg, init) = match arm {
            Arm::Scratch => {
                let cfg = self.model.with_items(stage.vocab_size);
                let p = cfg.init(&mut init_rng)?;
                (cfg, p)
            }
            _ => base.model.grow(&base.params, stage.vocab_size, &mut init_rng)?,
        };
        let mut train = TrainConfig {
            seed,
            strategy: Strategy::SaCaisr,
            fisher_schedule: FisherSchedule::Batch,
            ..self.train.clone()
        };
        let mut fisher = FisherState::new(&init, self.screening.clone())?;
        let penalty = match arm {
            Arm::Scratch | Arm::Finetune => {
                train.strategy = if arm == Arm::Scratch { Strategy::Scratch } else { Strategy::Finetune };
                Penalty::None
            }
            Arm::FisherOnly | Arm::InfonceOnly | Arm::Full => {
                train.fisher_mask = arm != Arm::InfonceOnly;
                train.regularizer = if arm == Arm::FisherOnly { Regularizer::Kl } else { Regularizer::Infonce };
                Penalty::Consistency {
                    fisher: &mut fisher,
                    contrastive: &self.contrastive,
                    reference_items: base.model.n_items,
                }
            }
        };
        let r = train_stage(&init, &cfg, 1, &stage.train, &stage.valid, &train, penalty, &mut ())?;
        let test = evaluate_stage(1, &r.params, &cfg, &stage.test_samples(cfg.max_seq_len), self.eval_options())?;
        let probe = evaluate_stage(1, &r.params, &cfg, &base.probe, self.eval_options())?.recall20();
        Ok(ArmResult {
            params: r.params,
            model: cfg,
            arm,
            seed,
            test_recall20: test.recall20(),
            probe_before: base.probe_recall,
            probe_after: probe,
            epochs: r.epochs_run,
            seconds: r.seconds,
        })
    }
}

/// First-stage model shared by every arm of one seed.
#[derive(Debug, Clone)]
pub struct Base {
    pub seed: u64,
    pub staged: Staged,
    pub model: ModelConfig,
    pub params: ParamSet,
    pub probe: Vec<Sample>,
    pub probe_recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub params: ParamSet,
    pub model: ModelConfig,
    pub arm: Arm,
    pub seed: u64,
    /// Recall@20 of the second-stage model on the third stage.
    pub test_recall20: f64,
    pub probe_before: f64,
    pub probe_after: f64,
    pub epochs: usize,
    pub seconds: f64,
}

impl ArmResult {
    pub fn probe_drop(&self) -> f64 {
        self.probe_before - self.probe_after
    }
}

/// Mean of `f` over the results of one arm.
pub fn arm_mean(results: &[ArmResult], arm: Arm, f: impl Fn(&ArmResult) -> f64) -> f64 {
    let xs: Vec<f64> = results.iter().filter(|r| r.arm == arm).map(f).collect();
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}
