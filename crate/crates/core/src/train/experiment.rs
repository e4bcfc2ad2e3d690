use super::{fisher_diagonal, train_stage, Observer, Penalty, StageResult, Strategy, TrainConfig, INIT_STREAM};
use crate::consistency::ContrastiveConfig;
use crate::data::{Sample, Staged};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_stage, MetricsReport};
use crate::model::{ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::screening::{FisherState, ScreeningConfig};

/// Everything a multi-stage run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    /// Architecture; `n_items` is replaced by each stage's vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub screening: ScreeningConfig,
    pub contrastive: ContrastiveConfig,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub result: StageResult,
    /// Metrics on the next stage; absent for the last stage.
    pub test: Option<MetricsReport>,
    /// Fisher state at the end of the stage (conflict-aware strategy only).
    pub fisher: Option<FisherState>,
}

fn pooled(staged: &Staged, upto: usize) -> (Vec<Sample>, Vec<Sample>) {
    let stages = &staged.stages[..=upto];
    (
        stages.iter().flat_map(|s| s.train.iter().cloned()).collect(),
        stages.iter().flat_map(|s| s.valid.iter().cloned()).collect(),
    )
}

/// Trains every stage in order under `exp.train.strategy` and tests each
/// stage's model on the following stage.
pub fn run_experiment(staged: &Staged, exp: &Experiment, observer: &mut dyn Observer) -> Result<Vec<StageOutcome>> {
    if staged.stages.len() < 2 {
        return Err(Error::Invalid(format!(
            "an incremental run needs at least 2 stages, got {}",
            staged.stages.len()
        )));
    }
    exp.train.validate()?;
    exp.screening.validate()?;
    exp.contrastive.validate()?;
    let strategy = exp.train.strategy;
    let seed = exp.train.seed;
    let mut outcomes: Vec<StageOutcome> = Vec::with_capacity(staged.stages.len());
    let mut fisher: Option<FisherState> = None;
    let mut importance: Option<ParamSet> = None;

    for (m, stage) in staged.stages.iter().enumerate() {
        let mut init_rng = Rng::with_stream(seed, INIT_STREAM + m as u64);
        let fresh = m == 0 || matches!(strategy, Strategy::Scratch | Strategy::Retrain);
        let (cfg, init) = if fresh {
            let cfg = exp.model.with_items(stage.vocab_size);
            let p = cfg.init(&mut init_rng)?;
            (cfg, p)
        } else {
            let prev = outcomes.last().expect("previous stage");
            prev.model.grow(&prev.result.params, stage.vocab_size, &mut init_rng)?
        };

        let (train, valid) = if strategy == Strategy::Retrain {
            pooled(staged, m)
        } else {
            (stage.train.clone(), stage.valid.clone())
        };

        let result = match strategy {
            Strategy::SaCaisr if m > 0 => {
                let mut state = match fisher.take() {
                    Some(mut f) if exp.screening.persist_fisher => {
                        f.resize_to(&init);
                        f
                    }
                    _ => FisherState::new(&init, exp.screening.clone())?,
                };
                let penalty = Penalty::Consistency {
                    fisher: &mut state,
                    contrastive: &exp.contrastive,
                    reference_items: outcomes[m - 1].model.n_items,
                };
                let r = train_stage(&init, &cfg, m, &train, &valid, &exp.train, penalty, observer)?;
                fisher = Some(state);
                r
            }
            Strategy::Ewc if m > 0 => {
                let mut imp = importance.take().expect("importance from the previous stage");
                let mut grown = init.zeros_like();
                for (name, t) in grown.iter_mut() {
                    if let Some(old) = imp.get(name) {
                        t.data_mut()[..old.len()].copy_from_slice(old.data());
                    }
                }
                imp = grown;
                let penalty = Penalty::Ewc {
                    anchor: &init,
                    importance: &imp,
                };
                train_stage(&init, &cfg, m, &train, &valid, &exp.train, penalty, observer)?
            }
            _ => train_stage(&init, &cfg, m, &train, &valid, &exp.train, Penalty::None, observer)?,
        };

        if strategy == Strategy::Ewc && m + 1 < staged.stages.len() {
            importance = Some(fisher_diagonal(&result.params, &cfg, &stage.train, exp.train.batch_size)?);
        }

        let test_samples = stage.test_samples(cfg.max_seq_len);
        let test = if stage.test_sessions.is_none() {
            None
        } else if test_samples.is_empty() {
            log::warn!("stage {m}: no next-stage sample has a known target; skipping its test");
            None
        } else {
            let opts = exp.train.eval_options();
            Some(evaluate_stage(m, &result.params, &cfg, &test_samples, opts)?)
        };
        outcomes.push(StageOutcome {
            strategy,
            model: cfg,
            result,
            test,
            fisher: fisher.clone(),
        });
    }
    Ok(outcomes)
}

/// Runs each strategy on the same stages; checks that all runs agree on the
/// per-stage vocabulary.
pub fn run_strategies(
    staged: &Staged,
    exp: &Experiment,
    strategies: &[Strategy],
    observer: &mut dyn Observer,
) -> Result<Vec<Vec<StageOutcome>>> {
    let mut all = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let mut e = exp.clone();
        e.train.strategy = s;
        log::info!("running strategy {s}");
        let out = run_experiment(staged, &e, observer)?;
        if let Some(first) = all.first() {
            let first: &Vec<StageOutcome> = first;
            let same = first.len() == out.len() && first.iter().zip(&out).all(|(a, b)| a.model.n_items == b.model.n_items);
            if !same {
                return Err(Error::Invalid(format!("strategy {s} saw a different vocabulary")));
            }
        }
        all.push(out);
    }
    Ok(all)
}
