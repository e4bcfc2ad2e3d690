//! Stage-wise training: the conflict-aware update loop, the baseline
//! strategies, and the multi-stage experiment driver.

mod adam;
mod experiment;
mod resources;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamHyper, AdamState, ADAM_EPS};
pub use experiment::{run_experiment, run_strategies, Experiment, StageOutcome};
pub use resources::{current_rss_bytes, process_peak_rss_bytes, ResourceTracker};

use crate::consistency::{infonce_topk, leading_columns, leading_selection, ContrastiveConfig, Representation};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_stage, EvalOptions};
use crate::model::{self, bind, ce_loss, forward, score, Batch, ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::screening::{FisherState, FrozenReference, ScreeningConfig};
use crate::tape::{Gradients, Tape};
use crate::tensor::softmax;

/// RNG stream offsets; each stage `m` uses `offset + m`.
pub(crate) const TRAIN_STREAM: u64 = 10_000;
pub(crate) const MASK_STREAM: u64 = 20_000;
pub(crate) const INIT_STREAM: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Scratch,
    Finetune,
    Retrain,
    Ewc,
    SaCaisr,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Scratch,
        Strategy::Finetune,
        Strategy::Retrain,
        Strategy::Ewc,
        Strategy::SaCaisr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Scratch => "scratch",
            Strategy::Finetune => "finetune",
            Strategy::Retrain => "retrain",
            Strategy::Ewc => "ewc",
            Strategy::SaCaisr => "sa-caisr",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// What the reference-side term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// Contrastive alignment with the reference representations.
    Infonce,
    /// KL(reference ‖ updated) over next-item distributions.
    Kl,
}

/// When the Fisher scores are refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherSchedule {
    /// EMA update from every training batch.
    Batch,
    /// One averaged pass over the stage before training starts.
    Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ewc_lambda: f64,
    pub regularizer: Regularizer,
    /// Mask the reference by its Fisher scores; off means an unmasked reference.
    pub fisher_mask: bool,
    pub fisher_schedule: FisherSchedule,
    /// Reuse the CE forward pass for the contrastive anchors.
    pub shared_forward: bool,
    pub exclude_prefix_items: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SaCaisr,
            alpha: 1.0,
            batch_size: 256,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            ewc_lambda: 100.0,
            regularizer: Regularizer::Infonce,
            fisher_mask: true,
            fisher_schedule: FisherSchedule::Batch,
            shared_forward: true,
            exclude_prefix_items: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be finite and non-negative", self.alpha)));
        }
        if self.alpha > 4.0 {
            log::warn!("alpha {} is above the usual [0, 4] range", self.alpha);
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} not in [0,1)")));
            }
        }
        if !(self.ewc_lambda >= 0.0) {
            return Err(Error::Config("ewc_lambda must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            exclude_prefix_items: self.exclude_prefix_items,
            batch_size: self.batch_size,
        }
    }
}

/// The term added to the next-item loss during a stage.
pub enum Penalty<'a> {
    None,
    /// Align with the Fisher-masked frozen copy of the starting parameters.
    Consistency {
        fisher: &'a mut FisherState,
        contrastive: &'a ContrastiveConfig,
        /// Items the starting parameters were trained on; score vectors are
        /// compared over these only.
        reference_items: usize,
    },
    /// Quadratic pull towards `anchor`, weighted by `importance`.
    Ewc { anchor: &'a ParamSet, importance: &'a ParamSet },
}

/// Loss components of one optimizer step; `total = ce + weight · regularizer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub ce: f64,
    pub regularizer: f64,
    pub weight: f64,
    pub total: f64,
}

/// One structured record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub ce: f64,
    pub infonce: f64,
    pub total: f64,
    pub val_recall20: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: usize,
    /// Parameters from the best validation epoch.
    pub params: ParamSet,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub seconds: f64,
    pub peak_bytes: u64,
    pub val_recall20: Vec<Option<f64>>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepLoss>,
}

pub struct BatchEvent<'a> {
    pub stage: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: StepLoss,
    pub params: &'a ParamSet,
    pub reference: Option<&'a FrozenReference>,
    pub fisher: Option<&'a FisherState>,
}

/// Hooks into the training loop.
pub trait Observer {
    fn after_batch(&mut self, _event: &BatchEvent<'_>) {}
    fn after_epoch(&mut self, _record: &EpochRecord) {}
}

impl Observer for () {}

/// Gradients of the model's own mean CE on a batch, without dropout.
pub fn reference_gradients(params: &ParamSet, cfg: &ModelConfig, batch: &Batch, targets: &[usize]) -> Result<Gradients> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, true)?;
    let h = forward(&mut tape, &p, cfg, batch, None)?;
    let logits = score(&mut tape, &p, h)?;
    let loss = ce_loss(&mut tape, logits, targets)?;
    tape.backward(loss)
}

/// Mean squared batch gradient over one ordered pass through `samples`.
pub fn fisher_diagonal(params: &ParamSet, cfg: &ModelConfig, samples: &[Sample], batch_size: usize) -> Result<ParamSet> {
    let mut state = FisherState::new(params, ScreeningConfig::default())?;
    let n_batches = samples.len().div_ceil(batch_size.max(1));
    for chunk in samples.chunks(batch_size.max(1)) {
        let (batch, targets) = batch_of(chunk.iter(), cfg)?;
        let g = reference_gradients(params, cfg, &batch, &targets)?;
        state.add_weighted_square(&g, 1.0 / n_batches as f64)?;
    }
    Ok(state.scores().clone())
}

fn batch_of<'a>(samples: impl Iterator<Item = &'a Sample> + Clone, cfg: &ModelConfig) -> Result<(Batch, Vec<usize>)> {
    let batch = Batch::from_prefixes(samples.clone().map(|s| s.prefix.as_slice()), cfg.max_seq_len)?;
    Ok((batch, samples.map(|s| s.target).collect()))
}

fn nan_context(stage: usize, epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(tensor) => Error::NanLoss {
            stage,
            epoch,
            batch,
            tensor,
        },
        other => other,
    }
}

/// Trains one stage from `init`, returning the best-validation parameters.
pub fn train_stage(
    init: &ParamSet,
    model_cfg: &ModelConfig,
    stage: usize,
    train: &[Sample],
    valid: &[Sample],
    cfg: &TrainConfig,
    mut penalty: Penalty<'_>,
    observer: &mut dyn Observer,
) -> Result<StageResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyStage {
            index: stage,
            reason: "no training samples".into(),
        });
    }
    let mut tracker = ResourceTracker::start();
    let mut params = init.clone();
    let mut adam = AdamState::new(&params);
    let mut train_rng = Rng::with_stream(cfg.seed, TRAIN_STREAM + stage as u64);
    let mut mask_rng = Rng::with_stream(cfg.seed, MASK_STREAM + stage as u64);
    let mut reference = match penalty {
        Penalty::Consistency { .. } => Some(FrozenReference::new(init.clone())),
        _ => None,
    };

    if let (Penalty::Consistency { fisher, .. }, Some(r)) = (&mut penalty, &reference) {
        if cfg.fisher_mask && cfg.fisher_schedule == FisherSchedule::Stage {
            let scores = fisher_diagonal(r.params(), model_cfg, train, cfg.batch_size)?;
            fisher.replace_scores(scores)?;
        }
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut result = StageResult {
        stage,
        params: ParamSet::new(),
        epochs_run: 0,
        best_epoch: 0,
        seconds: 0.0,
        peak_bytes: 0,
        val_recall20: Vec::new(),
        epochs: Vec::new(),
        steps: Vec::new(),
    };
    if valid.is_empty() {
        log::warn!("stage {stage}: no validation samples; keeping the last epoch");
    }

    for epoch in 1..=cfg.max_epochs {
        train_rng.shuffle(&mut order);
        let (mut ce_sum, mut reg_sum, mut total_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = step(
                &mut params,
                &mut adam,
                model_cfg,
                chunk.iter().map(|&i| &train[i]),
                cfg,
                &mut penalty,
                reference.as_mut(),
                &mut train_rng,
                &mut mask_rng,
            )
            .map_err(nan_context(stage, epoch, b))?;
            ce_sum += loss.ce;
            reg_sum += loss.regularizer;
            total_sum += loss.total;
            n += 1;
            result.steps.push(loss);
            tracker.sample();
            observer.after_batch(&BatchEvent {
                stage,
                epoch,
                batch: b,
                loss,
                params: &params,
                reference: reference.as_ref(),
                fisher: match &penalty {
                    Penalty::Consistency { fisher, .. } => Some(&**fisher),
                    _ => None,
                },
            });
        }
        if let Penalty::Consistency { fisher, .. } = &mut penalty {
            if cfg.fisher_schedule == FisherSchedule::Batch {
                fisher.decay();
            }
        }

        let val = if valid.is_empty() {
            None
        } else {
            Some(evaluate_stage(stage, &params, model_cfg, valid, cfg.eval_options())?.recall20())
        };
        let record = EpochRecord {
            stage,
            epoch,
            ce: ce_sum / n as f64,
            infonce: reg_sum / n as f64,
            total: total_sum / n as f64,
            val_recall20: val,
            seconds: tracker.seconds(),
        };
        log::info!(
            "stage {stage} epoch {epoch}: ce {:.5} reg {:.5} val R@20 {}",
            record.ce,
            record.infonce,
            val.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        observer.after_epoch(&record);
        result.epochs.push(record);
        result.val_recall20.push(val);
        result.epochs_run = epoch;

        let score = val.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val.is_none() || score > *b,
        };
        if improved {
            best = Some((score, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    let (seconds, peak) = tracker.track();
    result.params = best_params;
    result.best_epoch = best_epoch;
    result.seconds = seconds;
    result.peak_bytes = peak;
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn step<'a>(
    params: &mut ParamSet,
    adam: &mut AdamState,
    model_cfg: &ModelConfig,
    samples: impl Iterator<Item = &'a Sample> + Clone,
    cfg: &TrainConfig,
    penalty: &mut Penalty<'_>,
    reference: Option<&mut FrozenReference>,
    train_rng: &mut Rng,
    mask_rng: &mut Rng,
) -> Result<StepLoss> {
    let (batch, targets) = batch_of(samples, model_cfg)?;
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, true)?;
    let h = forward(&mut tape, &p, model_cfg, &batch, Some(train_rng))?;
    let logits = score(&mut tape, &p, h)?;
    let ce = ce_loss(&mut tape, logits, &targets)?;
    let ce_value = tape.value(ce).item();

    let (loss, regularizer, weight) = match (&mut *penalty, reference) {
        (
            Penalty::Consistency {
                fisher,
                contrastive,
                reference_items,
            },
            Some(reference),
        ) => {
            if cfg.fisher_mask && cfg.fisher_schedule == FisherSchedule::Batch {
                let g = reference_gradients(reference.params(), model_cfg, &batch, &targets)?;
                fisher.accumulate(&g)?;
            }
            let masked = if cfg.fisher_mask {
                Some(reference.apply_mask(&fisher.mask_probabilities(), mask_rng)?)
            } else {
                None
            };
            let filtered = masked.as_ref().unwrap_or(reference.params());
            let reg = match cfg.regularizer {
                Regularizer::Infonce => {
                    let hidden = if cfg.shared_forward {
                        h
                    } else {
                        forward(&mut tape, &p, model_cfg, &batch, Some(train_rng))?
                    };
                    let (anchors, positives) = match contrastive.representation {
                        Representation::Hidden => (hidden, model::hidden_states(filtered, model_cfg, &batch)?),
                        Representation::Scores => {
                            let a = if cfg.shared_forward { logits } else { score(&mut tape, &p, hidden)? };
                            let known = (*reference_items).clamp(1, model_cfg.n_items);
                            let select = tape.constant(leading_selection(model_cfg.n_items, known));
                            let a = tape.matmul(a, select)?;
                            (a, leading_columns(&model::logits(filtered, model_cfg, &batch)?, known))
                        }
                    };
                    let positives = tape.constant(positives);
                    infonce_topk(&mut tape, anchors, positives, contrastive)?
                }
                Regularizer::Kl => {
                    let target = softmax(&model::logits(filtered, model_cfg, &batch)?, 1)?;
                    tape.kl_from_reference(logits, &target)?
                }
            };
            if masked.is_some() {
                reference.restore()?;
            }
            let reg_value = tape.value(reg).item();
            let scaled = tape.scale(reg, cfg.alpha)?;
            (tape.add(ce, scaled)?, reg_value, cfg.alpha)
        }
        _ => (ce, 0.0, 0.0),
    };

    let total_value = tape.value(loss).item();
    if !total_value.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let mut grads = tape.backward(loss)?;

    let (regularizer, weight, total_value) = match penalty {
        Penalty::Ewc { anchor, importance } => {
            let value = ewc_penalty(params, anchor, importance, cfg.ewc_lambda, &mut grads)?;
            (value, 1.0, ce_value + value)
        }
        _ => (regularizer, weight, total_value),
    };
    adam_step(params, &grads, adam, cfg.adam())?;
    Ok(StepLoss {
        ce: ce_value,
        regularizer,
        weight,
        total: total_value,
    })
}

/// Adds `λ F (θ − θ_old)` to `grads` and returns `λ/2 Σ F (θ − θ_old)²`.
fn ewc_penalty(params: &ParamSet, anchor: &ParamSet, importance: &ParamSet, lambda: f64, grads: &mut Gradients) -> Result<f64> {
    let mut value = 0.0;
    for (name, theta) in params.iter() {
        let (Some(old), Some(f)) = (anchor.get(name), importance.get(name)) else {
            return Err(Error::shape("ewc", format!("no anchor or importance for `{name}`")));
        };
        if old.shape() != theta.shape() || f.shape() != theta.shape() {
            return Err(Error::shape("ewc", format!("`{name}` layout differs from its anchor")));
        }
        let g = grads
            .get_mut(name)
            .ok_or_else(|| Error::shape("ewc", format!("no gradient for `{name}`")))?;
        for (((gi, &t), &o), &fi) in g.data_mut().iter_mut().zip(theta.data()).zip(old.data()).zip(f.data()) {
            let d = t - o;
            *gi += lambda * fi * d;
            value += 0.5 * lambda * fi * d * d;
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests;
