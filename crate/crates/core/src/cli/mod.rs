//! Experiment runner behind the `driftforge` binary.
//!
//! Every command writes into the output directory: a frozen `config.toml`,
//! and while it runs an `INCOMPLETE` marker that is removed on success and
//! holds the error message otherwise.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use config::{parse_strategies, DataSource, ExperimentConfig};

use crate::data::{assemble_stages, read_manifests, split_stages, write_manifests, StageStats, Staged};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_stage, write_metrics_csv, MetricsRow};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::train::{run_experiment, EpochRecord, Experiment, FisherSchedule, Observer, Regularizer, StageOutcome, Strategy};

#[derive(Debug, Parser)]
#[command(name = "driftforge", version, about = "Incremental sequential recommendation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `all` or a comma-separated list, e.g. `scratch,finetune,sa-caisr`.
    #[arg(long)]
    pub strategies: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the data into stages and write stage manifests.
    Prepare(CommonArgs),
    /// Train and test every selected strategy over the prepared stages.
    Run(CommonArgs),
    /// Sweep one component or hyperparameter of the conflict-aware strategy.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Grid values for `top-k` and `alpha`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Re-score saved checkpoints on each stage's test data.
    Eval(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Fisher,
    Infonce,
    /// Both switches together: four rows.
    Components,
    FisherSchedule,
    Smoothing,
    TopK,
    Alpha,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            let cfg = effective(&a)?;
            let stats = prepare(&cfg)?;
            print!("{}", summary_table(&stats));
            Ok(())
        }
        Command::Run(a) => {
            let cfg = effective(&a)?;
            guarded(&cfg.out_dir, || run(&cfg).map(|_| ()))
        }
        Command::Ablate { common, axis, values } => {
            let cfg = effective(&common)?;
            guarded(&cfg.out_dir, || ablate(&cfg, axis, &values).map(|_| ()))
        }
        Command::Eval(a) => {
            let cfg = effective(&a)?;
            guarded(&cfg.out_dir, || eval(&cfg).map(|_| ()))
        }
    }
}

fn effective(a: &CommonArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&a.config)?.with_overrides(a.out.clone(), a.seed, a.strategies.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

const INCOMPLETE: &str = "INCOMPLETE";

/// Runs `f` with the partial-output marker in place.
fn guarded(out: &Path, f: impl FnOnce() -> Result<()>) -> Result<()> {
    create_dir(out)?;
    let marker = out.join(INCOMPLETE);
    write_file(&marker, b"running\n")?;
    match f() {
        Ok(()) => std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e)),
        Err(e) => {
            let _ = std::fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

fn freeze_config(cfg: &ExperimentConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

pub fn stages_dir(out: &Path) -> PathBuf {
    out.join("stages")
}

pub fn checkpoint_path(out: &Path, strategy: Strategy, stage: usize) -> PathBuf {
    out.join("checkpoints").join(strategy.name()).join(format!("stage_{stage}.ckpt"))
}

pub fn fisher_path(out: &Path, strategy: Strategy, stage: usize) -> PathBuf {
    out.join("checkpoints").join(strategy.name()).join(format!("stage_{stage}.fisher"))
}

/// Writes the stage manifests and returns their statistics.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Vec<StageStats>> {
    freeze_config(cfg)?;
    let staged = split_stages(&cfg.events()?, &cfg.stages, cfg.seed)?;
    write_manifests(&staged, &stages_dir(&cfg.out_dir))?;
    Ok(staged.stats())
}

pub fn summary_table(stats: &[StageStats]) -> String {
    let mut out = format!(
        "{:>5} {:>8} {:>9} {:>8} {:>9} {:>12} {:>12} {:>12}\n",
        "stage", "users", "new_users", "items", "new_items", "interactions", "acts/user", "acts/item"
    );
    for (m, s) in stats.iter().enumerate() {
        out += &format!(
            "{:>5} {:>8} {:>9} {:>8} {:>9} {:>12} {:>12.2} {:>12.2}\n",
            m, s.users, s.new_users, s.items, s.new_items, s.interactions, s.avg_actions_per_user, s.avg_actions_per_item
        );
    }
    out
}

/// Rebuilds the staged dataset from the manifests written by `prepare`.
pub fn load_stages(cfg: &ExperimentConfig) -> Result<Staged> {
    let manifests = read_manifests(&stages_dir(&cfg.out_dir))?;
    let raw = manifests.into_iter().map(|m| m.sessions).collect();
    assemble_stages(raw, &cfg.stages, cfg.seed)
}

fn experiment(cfg: &ExperimentConfig) -> Experiment {
    Experiment {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        screening: cfg.screening.clone(),
        contrastive: cfg.contrastive.clone(),
    }
}

/// JSON-lines log of epochs and finished stages.
struct RunLog {
    out: BufWriter<File>,
    label: String,
    error: Option<std::io::Error>,
}

impl RunLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: create(path)?,
            label: String::new(),
            error: None,
        })
    }

    fn record(&mut self, value: serde_json::Value) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{value}") {
                self.error = Some(e);
            }
        }
    }

    fn stage_done(&mut self, o: &StageOutcome) {
        let r = &o.result;
        self.record(json!({
            "event": "stage",
            "run": self.label,
            "stage": r.stage,
            "epochs": r.epochs_run,
            "best_epoch": r.best_epoch,
            "seconds": r.seconds,
            "peak_bytes": r.peak_bytes,
            "test_recall20": o.test.as_ref().map(|t| t.recall20()),
        }));
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(Error::io(path, e));
        }
        self.out.flush().map_err(|e| Error::io(path, e))
    }
}

impl Observer for RunLog {
    fn after_epoch(&mut self, r: &EpochRecord) {
        self.record(json!({
            "event": "epoch",
            "run": self.label,
            "stage": r.stage,
            "epoch": r.epoch,
            "ce": r.ce,
            "regularizer": r.infonce,
            "total": r.total,
            "val_recall20": r.val_recall20,
            "seconds": r.seconds,
        }));
    }
}

fn metric_rows(label: &str, outcomes: &[StageOutcome]) -> Vec<MetricsRow> {
    outcomes
        .iter()
        .filter_map(|o| o.test.clone())
        .map(|report| MetricsRow {
            label: label.to_string(),
            report,
        })
        .collect()
}

fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = create(path)?;
    write_metrics_csv(&mut w, rows)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains every selected strategy; writes metrics, resources, checkpoints
/// and the run log. Returns the metric rows in output order.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    freeze_config(cfg)?;
    let staged = load_stages(cfg)?;
    let base = experiment(cfg);
    let out = &cfg.out_dir;
    let log_path = out.join("run.log");
    let mut log = RunLog::create(&log_path)?;
    let mut rows = Vec::new();
    let res_path = out.join("resources.csv");
    let mut resources = csv::Writer::from_writer(create(&res_path)?);
    resources.write_record(["strategy", "stage", "epochs", "best_epoch", "seconds", "peak_rss_bytes"])?;

    for &strategy in &cfg.strategies {
        let mut exp = base.clone();
        exp.train.strategy = strategy;
        log.label = strategy.name().to_string();
        log::info!("running {strategy}");
        let outcomes = run_experiment(&staged, &exp, &mut log)?;
        for o in &outcomes {
            let m = o.result.stage;
            save_checkpoint(&checkpoint_path(out, strategy, m), &o.model, &o.result.params)?;
            if let Some(f) = &o.fisher {
                f.save(&fisher_path(out, strategy, m))?;
            }
            log.stage_done(o);
            resources.write_record([
                strategy.name().to_string(),
                m.to_string(),
                o.result.epochs_run.to_string(),
                o.result.best_epoch.to_string(),
                format!("{:.3}", o.result.seconds),
                o.result.peak_bytes.to_string(),
            ])?;
        }
        rows.extend(metric_rows(strategy.name(), &outcomes));
    }
    resources.flush().map_err(|e| Error::io(&res_path, e))?;
    log.finish(&log_path)?;
    write_csv(&out.join("metrics.csv"), &rows)?;
    Ok(rows)
}

/// One labelled variant of the conflict-aware run.
fn variants(base: &Experiment, axis: Axis, values: &[f64]) -> Result<Vec<(String, Experiment)>> {
    let grid = matches!(axis, Axis::TopK | Axis::Alpha);
    if !grid && !values.is_empty() {
        return Err(Error::Config(format!("axis {axis:?} takes no values")));
    }
    let mut sa = base.clone();
    sa.train.strategy = Strategy::SaCaisr;
    let with = |f: &dyn Fn(&mut Experiment)| {
        let mut e = sa.clone();
        f(&mut e);
        e
    };
    let v = |s: &str, e: Experiment| (s.to_string(), e);
    Ok(match axis {
        Axis::Fisher => vec![
            v("fisher=on", with(&|e| e.train.fisher_mask = true)),
            v("fisher=off", with(&|e| e.train.fisher_mask = false)),
        ],
        Axis::Infonce => vec![
            v("infonce=on", with(&|e| e.train.regularizer = Regularizer::Infonce)),
            v("infonce=off", with(&|e| e.train.regularizer = Regularizer::Kl)),
        ],
        Axis::Components => vec![
            v("fisher+infonce", with(&|e| {
                e.train.fisher_mask = true;
                e.train.regularizer = Regularizer::Infonce;
            })),
            v("fisher", with(&|e| {
                e.train.fisher_mask = true;
                e.train.regularizer = Regularizer::Kl;
            })),
            v("infonce", with(&|e| {
                e.train.fisher_mask = false;
                e.train.regularizer = Regularizer::Infonce;
            })),
            v("neither", with(&|e| e.train.strategy = Strategy::Finetune)),
        ],
        Axis::FisherSchedule => vec![
            v("fisher_schedule=batch", with(&|e| e.train.fisher_schedule = FisherSchedule::Batch)),
            v("fisher_schedule=stage", with(&|e| e.train.fisher_schedule = FisherSchedule::Stage)),
        ],
        Axis::Smoothing => vec![
            v(&format!("ema_beta={}", sa.screening.ema_beta), sa.clone()),
            v("ema_beta=0", with(&|e| e.screening.ema_beta = 0.0)),
        ],
        Axis::TopK => {
            let ks: Vec<usize> = if values.is_empty() {
                vec![1, 4, 16]
            } else {
                values
                    .iter()
                    .map(|&k| {
                        if k >= 1.0 && k.fract() == 0.0 {
                            Ok(k as usize)
                        } else {
                            Err(Error::Config(format!("top_k {k} must be a positive integer")))
                        }
                    })
                    .collect::<Result<_>>()?
            };
            ks.into_iter().map(|k| v(&format!("top_k={k}"), with(&|e| e.contrastive.top_k = k))).collect()
        }
        Axis::Alpha => {
            let alphas = if values.is_empty() { vec![0.0, 0.5, 1.0, 2.0, 4.0] } else { values.to_vec() };
            alphas.into_iter().map(|a| v(&format!("alpha={a}"), with(&|e| e.train.alpha = a))).collect()
        }
    })
}

pub fn ablation_path(out: &Path, axis: Axis) -> PathBuf {
    let name = axis.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    out.join(format!("ablation_{name}.csv"))
}

/// Runs each variant of `axis` with the same seed and writes
/// `ablation_<axis>.csv`.
pub fn ablate(cfg: &ExperimentConfig, axis: Axis, values: &[f64]) -> Result<Vec<MetricsRow>> {
    let runs = variants(&experiment(cfg), axis, values)?;
    freeze_config(cfg)?;
    let staged = load_stages(cfg)?;
    let mut rows = Vec::new();
    for (label, exp) in &runs {
        log::info!("ablation run {label}");
        let outcomes = run_experiment(&staged, exp, &mut ())?;
        rows.extend(metric_rows(label, &outcomes));
    }
    write_csv(&ablation_path(&cfg.out_dir, axis), &rows)?;
    Ok(rows)
}

/// Scores the checkpoints of each selected strategy on the stage after the
/// one it was trained on; writes `eval.csv`.
pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let staged = load_stages(cfg)?;
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for stage in &staged.stages {
            let samples = stage.test_samples(cfg.stages.max_seq_len);
            if samples.is_empty() {
                continue;
            }
            let (model, params) = load_checkpoint(&checkpoint_path(&cfg.out_dir, strategy, stage.index))?;
            if model.n_items != stage.vocab_size {
                return Err(Error::Checkpoint(format!(
                    "{strategy} stage {}: checkpoint has {} items, stage has {}",
                    stage.index, model.n_items, stage.vocab_size
                )));
            }
            let report = evaluate_stage(stage.index, &params, &model, &samples, cfg.train.eval_options())?;
            rows.push(MetricsRow {
                label: strategy.name().to_string(),
                report,
            });
        }
    }
    write_csv(&cfg.out_dir.join("eval.csv"), &rows)?;
    Ok(rows)
}
