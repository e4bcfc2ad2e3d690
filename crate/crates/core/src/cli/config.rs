use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::ContrastiveConfig;
use crate::data::{generate_drift, ingest, DriftScenario, InputFormat, InteractionEvent, StagePlan};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::screening::ScreeningConfig;
use crate::train::{Strategy, TrainConfig};

/// Where interactions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// An interaction log; relative paths resolve against the config file.
    File { path: PathBuf, format: InputFormat },
    /// A generated drifting stream; its `seed` is replaced by the run seed.
    Synthetic { scenario: DriftScenario },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    pub data: DataSource,
    #[serde(default)]
    pub stages: StagePlan,
    /// `n_items` is ignored; each stage sets its own.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub screening: ScreeningConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

/// `all` or a comma-separated list of strategy names.
pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    if list.trim() == "all" {
        return Ok(default_strategies());
    }
    let mut out: Vec<Strategy> = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let s: Strategy = name.parse()?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty strategy list".into()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let DataSource::File { path: data, .. } = &mut cfg.data {
            if data.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                *data = base.join(&*data);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies command-line overrides; the seed also drives training.
    pub fn with_overrides(mut self, out: Option<PathBuf>, seed: Option<u64>, strategies: Option<&str>) -> Result<Self> {
        if let Some(out) = out {
            self.out_dir = out;
        }
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(list) = strategies {
            self.strategies = parse_strategies(list)?;
        }
        self.train.seed = self.seed;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.model.with_items(1).validate()?;
        self.train.validate()?;
        self.screening.validate()?;
        self.contrastive.validate()?;
        if self.model.max_seq_len != self.stages.max_seq_len {
            return Err(Error::Config(format!(
                "model.max_seq_len {} differs from stages.max_seq_len {}",
                self.model.max_seq_len, self.stages.max_seq_len
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies selected".into()));
        }
        match &self.data {
            DataSource::File { path, .. } if !path.is_file() => Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            )),
            DataSource::Synthetic { scenario } => scenario.clone().validated().map(|_| ()),
            _ => Ok(()),
        }
    }

    pub fn events(&self) -> Result<Vec<InteractionEvent>> {
        match &self.data {
            DataSource::File { path, format } => ingest(path, *format),
            DataSource::Synthetic { scenario } => generate_drift(&DriftScenario {
                seed: self.seed,
                ..scenario.clone()
            }),
        }
    }
}
