use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use super::optim::OptimizerConfig;
use super::schedule::ScheduleSpec;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::masking::Strategy;
use crate::model::ModelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Log alignment every `every` steps; 0 disables it.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Monitored layer names.
    #[serde(default = "default_layers")]
    pub layers: Vec<String>,
}

fn default_every() -> usize {
    10
}

fn default_layers() -> Vec<String> {
    vec!["block3.conv2".to_string()]
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            every: default_every(),
            layers: default_layers(),
        }
    }
}

/// One training run, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 1 runs every worker on the calling thread.
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// N.
    pub workers: usize,
    /// P: number of workers holding each maskable unit.
    pub overlap: usize,
    pub strategy: Strategy,
    /// Epochs of the P = N baseline.
    pub epochs_full: usize,
    pub batch_per_worker: usize,
    /// Scale the step budget by N / P.
    #[serde(default = "default_true")]
    pub flop_match: bool,
    /// Exact step count; overrides the epoch budget.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Evaluation interval in steps; defaults to one epoch-equivalent.
    #[serde(default)]
    pub eval_every: Option<usize>,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
}

fn default_threads() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        cfg.dataset.resolve(&base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers (N) must be at least 1"));
        }
        if self.overlap == 0 || self.overlap > self.workers {
            return Err(Error::config(format!(
                "overlap (P={}) must be between 1 and workers (N={})",
                self.overlap, self.workers
            )));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        if self.batch_per_worker == 0 {
            return Err(Error::config("batch_per_worker must be at least 1"));
        }
        if self.epochs_full == 0 && self.steps.is_none() {
            return Err(Error::config("epochs_full must be at least 1"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every must be at least 1"));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.model.topology()?;
        Ok(())
    }

    /// Same run with a different overlap and strategy.
    pub fn with_overlap(&self, overlap: usize, strategy: Strategy) -> Self {
        Self {
            overlap,
            strategy,
            ..self.clone()
        }
    }
}
